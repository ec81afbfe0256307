//! Iterative routing with softmax coupling coefficients.
//!
//! ```text
//! b_ij ← 0
//! repeat r times:
//!     c_i  ← softmax_j(b_i)
//!     s_j  ← Σ_i c_ij û_{j|i}
//!     v_j  ← squash(s_j)
//!     b_ij ← b_ij + ⟨û_{j|i}, v_j⟩
//! ```
//!
//! The result reports `v_j` as the output capsule, `v_j/‖v_j‖` as the pose and
//! `‖v_j‖` as the activation.

use alloc::vec;
use alloc::vec::Vec;

use super::squash::{squash_backward_into, squash_into};
use super::{pose_backward, PredictionTensor, RoutingCotangent, RoutingError, RoutingResult};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicRoutingConfig {
    pub iterations: usize,
}

impl Default for DynamicRoutingConfig {
    fn default() -> Self {
        DynamicRoutingConfig { iterations: 3 }
    }
}

impl DynamicRoutingConfig {
    pub fn new(iterations: usize) -> Result<Self, RoutingError> {
        if iterations == 0 {
            return Err(RoutingError::ZeroIterations);
        }
        Ok(DynamicRoutingConfig { iterations })
    }
}

/// Intermediates of every iteration, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTrace {
    /// Coupling coefficients `c_ij` per iteration, `n_in × n_out`.
    pub couplings: Vec<Vec<f64>>,
    /// Weighted sums `s_j` per iteration, `n_out × k`.
    pub weighted: Vec<Vec<f64>>,
    /// Squashed outputs `v_j` per iteration, `n_out × k`.
    pub squashed: Vec<Vec<f64>>,
}

pub fn dynamic_routing(
    u: &PredictionTensor,
    cfg: DynamicRoutingConfig,
) -> Result<RoutingResult, RoutingError> {
    dynamic_routing_traced(u, cfg).map(|(r, _)| r)
}

fn softmax_rows(logits: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let b = &logits[i * m..(i + 1) * m];
        let c = &mut out[i * m..(i + 1) * m];
        let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (cv, &bv) in c.iter_mut().zip(b) {
            *cv = math::exp(bv - max);
            total += *cv;
        }
        for cv in c.iter_mut() {
            *cv /= total;
        }
    }
}

pub fn dynamic_routing_traced(
    u: &PredictionTensor,
    cfg: DynamicRoutingConfig,
) -> Result<(RoutingResult, DynamicTrace), RoutingError> {
    if cfg.iterations == 0 {
        return Err(RoutingError::ZeroIterations);
    }
    u.check_finite()?;
    let (n, m, k) = (u.n_in(), u.n_out(), u.k());
    let mut logits = vec![0.0; n * m];
    let mut trace = DynamicTrace {
        couplings: Vec::with_capacity(cfg.iterations),
        weighted: Vec::with_capacity(cfg.iterations),
        squashed: Vec::with_capacity(cfg.iterations),
    };
    for _ in 0..cfg.iterations {
        let mut c = vec![0.0; n * m];
        softmax_rows(&logits, n, m, &mut c);

        let mut s = vec![0.0; m * k];
        for i in 0..n {
            for j in 0..m {
                let cij = c[i * m + j];
                for (sv, &x) in s[j * k..(j + 1) * k].iter_mut().zip(u.vector(i, j)) {
                    *sv += cij * x;
                }
            }
        }

        let mut v = vec![0.0; m * k];
        for j in 0..m {
            squash_into(&s[j * k..(j + 1) * k], &mut v[j * k..(j + 1) * k]);
        }

        for i in 0..n {
            for j in 0..m {
                logits[i * m + j] += math::dot(u.vector(i, j), &v[j * k..(j + 1) * k]);
            }
        }

        trace.couplings.push(c);
        trace.weighted.push(s);
        trace.squashed.push(v);
    }

    let v = trace
        .squashed
        .last()
        .expect("at least one iteration")
        .clone();
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(RoutingError::NonFinite {
            i: 0,
            j: pos / k,
            f: pos % k,
        });
    }
    let activation = (0..m).map(|j| math::norm(&v[j * k..(j + 1) * k])).collect();
    Ok((RoutingResult::from_capsules(m, k, v, activation), trace))
}

/// Gradient of `⟨upstream, dynamic_routing(u)⟩` with respect to `u`,
/// differentiating through every unrolled iteration (the routing logits are
/// treated as differentiable intermediates).
pub fn dynamic_routing_backward(
    u: &PredictionTensor,
    cfg: DynamicRoutingConfig,
    upstream: &RoutingCotangent,
) -> Result<PredictionTensor, RoutingError> {
    let (n, m, k) = (u.n_in(), u.n_out(), u.k());
    upstream.check(m, k)?;
    let (result, trace) = dynamic_routing_traced(u, cfg)?;
    let iters = cfg.iterations;

    // Cotangent on the final squashed output.
    let mut g_v_final = upstream.s_hat.clone();
    for j in 0..m {
        let v = result.s_hat_row(j);
        let row = &mut g_v_final[j * k..(j + 1) * k];
        let len = result.activation[j];
        if len > 0.0 {
            for (g, &x) in row.iter_mut().zip(v) {
                *g += upstream.activation[j] * x / len;
            }
        }
        pose_backward(v, &upstream.pose[j * k..(j + 1) * k], row);
    }

    let mut grad = PredictionTensor::zeros(n, m, k)?;
    // Cotangent on the logits after iteration t (b^{t+1}); the last update is unused.
    let mut g_logits = vec![0.0; n * m];
    let mut g_v = vec![0.0; m * k];
    let mut g_s = vec![0.0; m * k];
    let mut g_c = vec![0.0; n * m];
    for t in (0..iters).rev() {
        let c = &trace.couplings[t];
        let s = &trace.weighted[t];
        let v = &trace.squashed[t];

        // b^{t+1} = b^t + ⟨u, v^t⟩
        if t + 1 == iters {
            g_v.copy_from_slice(&g_v_final);
        } else {
            g_v.fill(0.0);
        }
        for i in 0..n {
            for j in 0..m {
                let gb = g_logits[i * m + j];
                if gb == 0.0 {
                    continue;
                }
                let x = u.vector(i, j);
                for (gv, &xv) in g_v[j * k..(j + 1) * k].iter_mut().zip(x) {
                    *gv += gb * xv;
                }
                for (gu, &vv) in grad.vector_mut(i, j).iter_mut().zip(&v[j * k..(j + 1) * k]) {
                    *gu += gb * vv;
                }
            }
        }

        for j in 0..m {
            squash_backward_into(
                &s[j * k..(j + 1) * k],
                &g_v[j * k..(j + 1) * k],
                &mut g_s[j * k..(j + 1) * k],
            );
        }

        // s_j = Σ_i c_ij u_ij
        for i in 0..n {
            for j in 0..m {
                let gs = &g_s[j * k..(j + 1) * k];
                g_c[i * m + j] = math::dot(gs, u.vector(i, j));
                let cij = c[i * m + j];
                for (gu, &g) in grad.vector_mut(i, j).iter_mut().zip(gs) {
                    *gu += cij * g;
                }
            }
        }

        // c_i = softmax(b_i^t); b^{t+1} also depends on b^t through the identity.
        for i in 0..n {
            let ci = &c[i * m..(i + 1) * m];
            let gci = &g_c[i * m..(i + 1) * m];
            let inner = math::dot(ci, gci);
            for j in 0..m {
                g_logits[i * m + j] += ci[j] * (gci[j] - inner);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::squash;

    #[test]
    fn single_output_reduces_to_squash_of_vote_sum() {
        // With one output every coupling is 1, so s = Σ_i û_i whatever the
        // iteration count.
        let v = [0.3, -1.2, 0.5];
        for n in [1usize, 2, 5] {
            let u = PredictionTensor::new(n, 1, 3, v.repeat(n)).unwrap();
            let total: Vec<f64> = v.iter().map(|x| x * n as f64).collect();
            let want = squash(&total);
            for iters in [1, 3, 5] {
                let r = dynamic_routing(&u, DynamicRoutingConfig::new(iters).unwrap()).unwrap();
                for (a, b) in r.s_hat.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-15);
                }
                assert!((r.activation[0] - math::norm(&want)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn first_couplings_are_uniform() {
        let u = PredictionTensor::new(3, 4, 2, (0..24).map(|x| x as f64 * 0.1 - 1.0).collect())
            .unwrap();
        let (_, trace) = dynamic_routing_traced(&u, DynamicRoutingConfig::default()).unwrap();
        assert!(trace.couplings[0].iter().all(|&c| c == 0.25));
        for c in &trace.couplings {
            for i in 0..3 {
                let row: f64 = c[i * 4..(i + 1) * 4].iter().sum();
                assert!((row - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        assert_eq!(
            DynamicRoutingConfig::new(0),
            Err(RoutingError::ZeroIterations)
        );
        let u = PredictionTensor::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(dynamic_routing(&u, DynamicRoutingConfig { iterations: 0 }).is_err());
    }
}
