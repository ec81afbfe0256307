//! Routing-by-agreement.
//!
//! Every routing rule consumes a [`PredictionTensor`] (one k-vector per
//! input/output capsule pair) and produces a [`RoutingResult`]. Two rules are
//! provided:
//!
//! * [`fm_agreement`]: the sum of element-wise products over all pairs of
//!   L2-normalized predictions, evaluated in O(n·m·k) with the
//!   factorization-machine identity `Σ_{a<b} x_a x_b = ½((Σx)² − Σx²)` and
//!   scaled by `1/n`. [`fm_agreement_bruteforce`] enumerates the pairs and is
//!   kept as the reference.
//! * [`dynamic_routing`]: the iterative softmax/squash baseline.
//!
//! Sums over input capsules always run in ascending `i`.

mod dynamic;
mod fm;
mod squash;

use alloc::vec;
use alloc::vec::Vec;

pub use dynamic::{
    dynamic_routing, dynamic_routing_backward, dynamic_routing_traced, DynamicRoutingConfig,
    DynamicTrace,
};
pub use fm::{
    fm_activation_closed_form, fm_activation_jacobian, fm_agreement, fm_agreement_backward,
    fm_agreement_bruteforce, fm_agreement_bruteforce_with, fm_agreement_with, PairScaling,
};
pub use squash::{squash, squash_backward, squash_into};

use crate::math;
use crate::tensor::Tensor;

/// Threshold below which a pose is reported as the zero vector. The same value
/// is added to the norm in the pose denominator.
pub const POSE_EPS: f64 = 1e-12;

/// Tolerance on slice norms accepted as "unit" by
/// [`fm_activation_closed_form`].
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RoutingError {
    #[error("prediction dimensions must be positive, got n_in={n_in} n_out={n_out} k={k}")]
    EmptyDimension { n_in: usize, n_out: usize, k: usize },
    #[error("expected {expected} prediction values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite prediction at input {i}, output {j}, feature {f}")]
    NonFinite { i: usize, j: usize, f: usize },
    #[error("prediction vector for input {i}, output {j} is zero and cannot be normalized")]
    ZeroPrediction { i: usize, j: usize },
    #[error("prediction vector for input {i}, output {j} has norm {norm}, expected 1")]
    NotNormalized { i: usize, j: usize, norm: f64 },
    #[error("cotangent shape does not match n_out={n_out}, k={k}")]
    CotangentShape { n_out: usize, k: usize },
    #[error("dynamic routing needs at least one iteration")]
    ZeroIterations,
}

/// Prediction vectors `û_{j|i}` laid out as `[i][j][f]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor {
    n_in: usize,
    n_out: usize,
    k: usize,
    values: Vec<f64>,
}

impl PredictionTensor {
    /// Wraps `values` (length `n_in·n_out·k`). Non-finite entries are rejected.
    pub fn new(
        n_in: usize,
        n_out: usize,
        k: usize,
        values: Vec<f64>,
    ) -> Result<Self, RoutingError> {
        if n_in == 0 || n_out == 0 || k == 0 {
            return Err(RoutingError::EmptyDimension { n_in, n_out, k });
        }
        let expected = n_in * n_out * k;
        if values.len() != expected {
            return Err(RoutingError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        let t = PredictionTensor {
            n_in,
            n_out,
            k,
            values,
        };
        t.check_finite()?;
        Ok(t)
    }

    /// A tensor of zeros, used for cotangents.
    pub fn zeros(n_in: usize, n_out: usize, k: usize) -> Result<Self, RoutingError> {
        Self::new(n_in, n_out, k, vec![0.0; n_in * n_out * k])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, RoutingError> {
        match *t.shape() {
            [n_in, n_out, k] => Self::new(n_in, n_out, k, t.data().to_vec()),
            _ => Err(RoutingError::LengthMismatch {
                expected: 0,
                got: t.len(),
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_in, self.n_out, self.k], self.values.clone())
            .expect("dimensions validated at construction")
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `û_{j|i}` as a slice of length `k`.
    pub fn vector(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n_out + j) * self.k;
        &self.values[start..start + self.k]
    }

    pub(crate) fn vector_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.n_out + j) * self.k;
        &mut self.values[start..start + self.k]
    }

    pub(crate) fn check_finite(&self) -> Result<(), RoutingError> {
        if let Some(pos) = self.values.iter().position(|x| !x.is_finite()) {
            let f = pos % self.k;
            let j = (pos / self.k) % self.n_out;
            let i = pos / (self.k * self.n_out);
            return Err(RoutingError::NonFinite { i, j, f });
        }
        Ok(())
    }
}

/// Scales every `û_{j|i}` to unit length.
pub fn l2_normalize_predictions(u: &PredictionTensor) -> Result<PredictionTensor, RoutingError> {
    u.check_finite()?;
    let mut out = u.clone();
    for i in 0..u.n_in {
        for j in 0..u.n_out {
            let v = out.vector_mut(i, j);
            let norm = math::norm(v);
            if norm == 0.0 {
                return Err(RoutingError::ZeroPrediction { i, j });
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
    }
    Ok(out)
}

/// Backward pass of `y = x / ‖x‖` for one vector: `(g − y⟨y, g⟩) / ‖x‖`.
pub(crate) fn normalize_backward(x: &[f64], g_y: &[f64], out: &mut [f64]) {
    let norm = math::norm(x);
    let mut dot = 0.0;
    for (xv, gv) in x.iter().zip(g_y) {
        dot += (xv / norm) * gv;
    }
    for ((o, xv), gv) in out.iter_mut().zip(x).zip(g_y) {
        *o = (gv - (xv / norm) * dot) / norm;
    }
}

/// Output of one routing pass for a single example.
///
/// For pairwise agreement `s_hat` holds `ŝ_j` and `activation[j]` is exactly
/// `Σ_f s_hat[j][f]`. For dynamic routing `s_hat` holds the squashed output
/// `v_j` and the activation is its length.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult {
    n_out: usize,
    k: usize,
    /// Output capsules, `n_out × k`. These feed the next layer.
    pub s_hat: Vec<f64>,
    /// Unit pose read-outs `ŝ_j / ‖ŝ_j‖`, `n_out × k`.
    pub pose: Vec<f64>,
    pub activation: Vec<f64>,
    /// `true` where `‖ŝ_j‖ < POSE_EPS`; the pose row is then all zeros.
    pub degenerate_pose: Vec<bool>,
}

impl RoutingResult {
    pub(crate) fn from_capsules(
        n_out: usize,
        k: usize,
        s_hat: Vec<f64>,
        activation: Vec<f64>,
    ) -> Self {
        let mut pose = vec![0.0; n_out * k];
        let mut degenerate_pose = vec![false; n_out];
        for j in 0..n_out {
            let s = &s_hat[j * k..(j + 1) * k];
            let norm = math::norm(s);
            if norm < POSE_EPS {
                degenerate_pose[j] = true;
                continue;
            }
            for (p, &sv) in pose[j * k..(j + 1) * k].iter_mut().zip(s) {
                *p = sv / (norm + POSE_EPS);
            }
        }
        RoutingResult {
            n_out,
            k,
            s_hat,
            pose,
            activation,
            degenerate_pose,
        }
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s_hat_row(&self, j: usize) -> &[f64] {
        &self.s_hat[j * self.k..(j + 1) * self.k]
    }

    pub fn pose_row(&self, j: usize) -> &[f64] {
        &self.pose[j * self.k..(j + 1) * self.k]
    }
}

/// Cotangents flowing into a [`RoutingResult`]. Zero-filled fields contribute
/// nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingCotangent {
    n_out: usize,
    k: usize,
    pub s_hat: Vec<f64>,
    pub pose: Vec<f64>,
    pub activation: Vec<f64>,
}

impl RoutingCotangent {
    pub fn zeros(n_out: usize, k: usize) -> Self {
        RoutingCotangent {
            n_out,
            k,
            s_hat: vec![0.0; n_out * k],
            pose: vec![0.0; n_out * k],
            activation: vec![0.0; n_out],
        }
    }

    /// Cotangent that only weights the activations.
    pub fn from_activation(k: usize, activation: Vec<f64>) -> Self {
        let mut c = Self::zeros(activation.len(), k);
        c.activation = activation;
        c
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub(crate) fn check(&self, n_out: usize, k: usize) -> Result<(), RoutingError> {
        if self.n_out != n_out
            || self.k != k
            || self.s_hat.len() != n_out * k
            || self.pose.len() != n_out * k
            || self.activation.len() != n_out
        {
            return Err(RoutingError::CotangentShape { n_out, k });
        }
        Ok(())
    }
}

/// Adds the cotangent of `p = s / (‖s‖ + ε)` (zero when `‖s‖ < ε`) into `g_s`.
pub(crate) fn pose_backward(s: &[f64], g_pose: &[f64], g_s: &mut [f64]) {
    let norm = math::norm(s);
    if norm < POSE_EPS {
        return;
    }
    let denom = norm + POSE_EPS;
    let dot = math::dot(s, g_pose);
    let coef = dot / (norm * denom * denom);
    for ((g, &sv), &gp) in g_s.iter_mut().zip(s).zip(g_pose) {
        *g += gp / denom - sv * coef;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let u = PredictionTensor::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let n = l2_normalize_predictions(&u).unwrap();
        assert_eq!(n.values(), &[0.6, 0.8]);

        let unit = PredictionTensor::new(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let again = l2_normalize_predictions(&unit).unwrap();
        for (a, b) in again.values().iter().zip(unit.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_zero_slice() {
        let u =
            PredictionTensor::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            l2_normalize_predictions(&u),
            Err(RoutingError::ZeroPrediction { i: 1, j: 1 })
        );
    }

    #[test]
    fn rejects_non_finite() {
        let err = PredictionTensor::new(1, 2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).unwrap_err();
        assert_eq!(err, RoutingError::NonFinite { i: 0, j: 1, f: 0 });
        assert!(PredictionTensor::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn pose_is_unit_or_flagged_zero() {
        let r = RoutingResult::from_capsules(2, 2, vec![3.0, 4.0, 0.0, 0.0], vec![7.0, 0.0]);
        assert!((math::norm(r.pose_row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(r.pose_row(1), &[0.0, 0.0]);
        assert_eq!(r.degenerate_pose, vec![false, true]);
    }
}
