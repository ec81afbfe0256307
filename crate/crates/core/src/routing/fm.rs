//! Pairwise agreement via the factorization-machine identity.

use alloc::vec;
use alloc::vec::Vec;

use super::{
    l2_normalize_predictions, normalize_backward, pose_backward, PredictionTensor,
    RoutingCotangent, RoutingError, RoutingResult, UNIT_TOL,
};
use crate::math;

/// How the pairwise sum is scaled.
///
/// `Mean` divides by the number of input capsules; this keeps the Jacobian of
/// the activation with respect to each prediction bounded by one for unit
/// inputs. `Unscaled` is the raw pair sum whose gradient grows like `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairScaling {
    #[default]
    Mean,
    Unscaled,
}

impl PairScaling {
    fn factor(self, n: usize) -> f64 {
        match self {
            PairScaling::Mean => 1.0 / n as f64,
            PairScaling::Unscaled => 1.0,
        }
    }
}

/// Linearized pairwise agreement with the default `1/n` scaling.
pub fn fm_agreement(u: &PredictionTensor) -> Result<RoutingResult, RoutingError> {
    fm_agreement_with(u, PairScaling::Mean)
}

/// Linearized pairwise agreement, O(n·m·k).
///
/// Each prediction is normalized on the fly and folded into a running sum and
/// sum of squares; `ŝ_j = scale · ½((Σv)⊙(Σv) − Σ v⊙v)`.
pub fn fm_agreement_with(
    u: &PredictionTensor,
    scaling: PairScaling,
) -> Result<RoutingResult, RoutingError> {
    u.check_finite()?;
    let (n, m, k) = (u.n_in(), u.n_out(), u.k());
    let mut sum = vec![0.0; m * k];
    let mut sum_sq = vec![0.0; m * k];
    for i in 0..n {
        for j in 0..m {
            let x = u.vector(i, j);
            let norm = math::norm(x);
            if norm == 0.0 {
                return Err(RoutingError::ZeroPrediction { i, j });
            }
            let acc = &mut sum[j * k..(j + 1) * k];
            let acc_sq = &mut sum_sq[j * k..(j + 1) * k];
            for f in 0..k {
                let v = x[f] / norm;
                acc[f] += v;
                acc_sq[f] += v * v;
            }
        }
    }
    let scale = scaling.factor(n);
    let s_hat: Vec<f64> = sum
        .iter()
        .zip(&sum_sq)
        .map(|(&s, &q)| 0.5 * (s * s - q) * scale)
        .collect();
    Ok(finish(m, k, s_hat))
}

/// Pair-enumeration reference with the default `1/n` scaling.
pub fn fm_agreement_bruteforce(u: &PredictionTensor) -> Result<RoutingResult, RoutingError> {
    fm_agreement_bruteforce_with(u, PairScaling::Mean)
}

/// Pairwise agreement by explicit enumeration of every pair `i₁ < i₂`,
/// O(n²·m·k). Shares nothing with [`fm_agreement_with`] beyond the
/// normalization step.
pub fn fm_agreement_bruteforce_with(
    u: &PredictionTensor,
    scaling: PairScaling,
) -> Result<RoutingResult, RoutingError> {
    let v = l2_normalize_predictions(u)?;
    let (n, m, k) = (u.n_in(), u.n_out(), u.k());
    let mut s_hat = vec![0.0; m * k];
    for j in 0..m {
        let acc = &mut s_hat[j * k..(j + 1) * k];
        for i1 in 0..n {
            let a = v.vector(i1, j);
            for i2 in i1 + 1..n {
                let b = v.vector(i2, j);
                for f in 0..k {
                    acc[f] += a[f] * b[f];
                }
            }
        }
    }
    let scale = scaling.factor(n);
    for s in &mut s_hat {
        *s *= scale;
    }
    Ok(finish(m, k, s_hat))
}

fn finish(m: usize, k: usize, s_hat: Vec<f64>) -> RoutingResult {
    let activation = (0..m)
        .map(|j| s_hat[j * k..(j + 1) * k].iter().sum())
        .collect();
    RoutingResult::from_capsules(m, k, s_hat, activation)
}

/// `â_j = (‖Σ_i û_{j|i}‖² − n) / (2n)` for unit-length predictions.
pub fn fm_activation_closed_form(
    u_normalized: &PredictionTensor,
) -> Result<Vec<f64>, RoutingError> {
    u_normalized.check_finite()?;
    let (n, m, k) = (u_normalized.n_in(), u_normalized.n_out(), u_normalized.k());
    for i in 0..n {
        for j in 0..m {
            let norm = math::norm(u_normalized.vector(i, j));
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(RoutingError::NotNormalized { i, j, norm });
            }
        }
    }
    let nf = n as f64;
    let mut out = Vec::with_capacity(m);
    let mut total = vec![0.0; k];
    for j in 0..m {
        total.fill(0.0);
        for i in 0..n {
            for (t, x) in total.iter_mut().zip(u_normalized.vector(i, j)) {
                *t += x;
            }
        }
        out.push((math::sum_sq(&total) - nf) / (2.0 * nf));
    }
    Ok(out)
}

/// `∂â_j / ∂û_{j|i,f} = scale · (Σ_i û_{j|i,f} − û_{j|i,f})`, evaluated at the
/// given (already normalized) predictions.
pub fn fm_activation_jacobian(
    u_normalized: &PredictionTensor,
    scaling: PairScaling,
) -> Result<PredictionTensor, RoutingError> {
    u_normalized.check_finite()?;
    let (n, m, k) = (u_normalized.n_in(), u_normalized.n_out(), u_normalized.k());
    let sum = column_sums(u_normalized);
    let scale = scaling.factor(n);
    let mut out = PredictionTensor::zeros(n, m, k)?;
    for i in 0..n {
        for j in 0..m {
            let x = u_normalized.vector(i, j);
            let s = &sum[j * k..(j + 1) * k];
            for (f, o) in out.vector_mut(i, j).iter_mut().enumerate() {
                *o = scale * (s[f] - x[f]);
            }
        }
    }
    Ok(out)
}

fn column_sums(v: &PredictionTensor) -> Vec<f64> {
    let (n, m, k) = (v.n_in(), v.n_out(), v.k());
    let mut sum = vec![0.0; m * k];
    for i in 0..n {
        for j in 0..m {
            for (s, x) in sum[j * k..(j + 1) * k].iter_mut().zip(v.vector(i, j)) {
                *s += x;
            }
        }
    }
    sum
}

/// Gradient of `⟨upstream, fm_agreement(u)⟩` with respect to the raw
/// (pre-normalization) predictions.
///
/// The cotangent on `ŝ` collects the direct term, the activation sum and the
/// pose normalization; it is pulled through the pairwise product and then
/// through the L2 normalization of each prediction.
pub fn fm_agreement_backward(
    u: &PredictionTensor,
    upstream: &RoutingCotangent,
) -> Result<PredictionTensor, RoutingError> {
    let (n, m, k) = (u.n_in(), u.n_out(), u.k());
    upstream.check(m, k)?;
    let v = l2_normalize_predictions(u)?;
    let forward = fm_agreement(u)?;
    let sum = column_sums(&v);

    let mut g_s = upstream.s_hat.clone();
    for j in 0..m {
        let row = &mut g_s[j * k..(j + 1) * k];
        for g in row.iter_mut() {
            *g += upstream.activation[j];
        }
        pose_backward(
            forward.s_hat_row(j),
            &upstream.pose[j * k..(j + 1) * k],
            row,
        );
    }

    let scale = PairScaling::Mean.factor(n);
    let mut grad = PredictionTensor::zeros(n, m, k)?;
    let mut g_v = vec![0.0; k];
    for i in 0..n {
        for j in 0..m {
            let vi = v.vector(i, j);
            let s = &sum[j * k..(j + 1) * k];
            let gs = &g_s[j * k..(j + 1) * k];
            for f in 0..k {
                g_v[f] = gs[f] * scale * (s[f] - vi[f]);
            }
            normalize_backward(u.vector(i, j), &g_v, grad.vector_mut(i, j));
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::l2_normalize_predictions;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(n: usize, m: usize, k: usize, seed: u64) -> PredictionTensor {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let values = (0..n * m * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        PredictionTensor::new(n, m, k, values).unwrap()
    }

    fn repeated(n: usize, unit: &[f64]) -> PredictionTensor {
        let values = (0..n).flat_map(|_| unit.iter().copied()).collect();
        PredictionTensor::new(n, 1, unit.len(), values).unwrap()
    }

    #[test]
    fn single_input_has_no_pairs() {
        let u = PredictionTensor::new(1, 1, 3, vec![0.0, 0.6, 0.8]).unwrap();
        for r in [
            fm_agreement(&u).unwrap(),
            fm_agreement_bruteforce(&u).unwrap(),
        ] {
            assert!(r.s_hat.iter().all(|&s| s == 0.0));
            assert_eq!(r.activation, vec![0.0]);
            assert_eq!(r.degenerate_pose, vec![true]);
        }
    }

    #[test]
    fn identical_unit_inputs() {
        let unit = [0.6, 0.8];
        let r = fm_agreement(&repeated(2, &unit)).unwrap();
        for (f, &x) in unit.iter().enumerate() {
            assert!((r.s_hat[f] - 0.5 * x * x).abs() < 1e-15);
        }
        assert!((r.activation[0] - 0.5).abs() < 1e-15);

        for n in [3, 7, 20] {
            let a = fm_agreement(&repeated(n, &unit)).unwrap().activation[0];
            assert!((a - (n as f64 - 1.0) / 2.0).abs() < 1e-12, "n={n}: {a}");
        }
        let b = fm_agreement_bruteforce(&repeated(3, &unit)).unwrap();
        assert!((b.activation[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_inputs_do_not_agree() {
        let u = PredictionTensor::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(fm_agreement(&u).unwrap().activation, vec![0.0]);
    }

    #[test]
    fn linearized_matches_enumeration() {
        let u = random(5, 3, 4, 11);
        let fast = fm_agreement(&u).unwrap();
        let slow = fm_agreement_bruteforce(&u).unwrap();
        for (a, b) in fast.s_hat.iter().zip(&slow.s_hat) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let fast = fm_agreement_with(&u, PairScaling::Unscaled).unwrap();
        let slow = fm_agreement_bruteforce_with(&u, PairScaling::Unscaled).unwrap();
        for (a, b) in fast.activation.iter().zip(&slow.activation) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn activation_is_row_sum() {
        let r = fm_agreement(&random(6, 4, 9, 12)).unwrap();
        for j in 0..4 {
            let sum: f64 = r.s_hat_row(j).iter().sum();
            assert_eq!(r.activation[j], sum);
        }
    }

    #[test]
    fn closed_form_examples() {
        let unit = [0.0, 1.0, 0.0];
        let a = fm_activation_closed_form(&repeated(5, &unit)).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-15);

        let eye = PredictionTensor::new(3, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        assert_eq!(fm_activation_closed_form(&eye).unwrap(), vec![0.0]);

        let v = l2_normalize_predictions(&random(8, 3, 16, 13)).unwrap();
        let closed = fm_activation_closed_form(&v).unwrap();
        let routed = fm_agreement(&v).unwrap();
        for (a, b) in closed.iter().zip(&routed.activation) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }

        let raw = random(2, 1, 4, 14);
        assert!(matches!(
            fm_activation_closed_form(&raw),
            Err(RoutingError::NotNormalized { .. })
        ));
    }

    #[test]
    fn jacobian_for_identical_inputs() {
        let unit = [0.6, 0.8];
        for n in [2usize, 5] {
            let jac = fm_activation_jacobian(&repeated(n, &unit), PairScaling::Mean).unwrap();
            let nf = n as f64;
            for i in 0..n {
                for (f, &x) in unit.iter().enumerate() {
                    let want = (nf - 1.0) * x / nf;
                    assert!((jac.vector(i, 0)[f] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let u = random(4, 2, 9, 15);
        let g = fm_agreement_backward(&u, &RoutingCotangent::zeros(2, 9)).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_cotangent() {
        let u = random(3, 2, 4, 16);
        assert!(matches!(
            fm_agreement_backward(&u, &RoutingCotangent::zeros(3, 4)),
            Err(RoutingError::CotangentShape { .. })
        ));
    }

    #[test]
    fn zero_prediction_is_an_error() {
        let u = PredictionTensor::new(2, 1, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            fm_agreement(&u),
            Err(RoutingError::ZeroPrediction { i: 1, j: 0 })
        );
    }
}
