//! Seeded generators for routing-only experiments.
//!
//! All randomness comes from xoshiro256++ (`rand_xoshiro::Xoshiro256PlusPlus`)
//! seeded through `seed_from_u64`, so every instance is reproducible from its
//! seed on any platform.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::math;
use crate::routing::{PredictionTensor, RoutingError};

pub type SeededRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("concentration must be positive, got {0}")]
    Concentration(f64),
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

/// A point on the unit sphere in `k` dimensions (normalized Gaussian draw).
pub fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = math::norm(&v);
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Predictions with entries drawn from `U(−1, 1)`.
pub fn random_predictions<R: Rng + ?Sized>(
    rng: &mut R,
    n_in: usize,
    n_out: usize,
    k: usize,
) -> Result<PredictionTensor, RoutingError> {
    let values = (0..n_in * n_out * k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    PredictionTensor::new(n_in, n_out, k, values)
}

/// Predictions where one output receives votes clustered around a common
/// direction and every other output receives independent uniform directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAgreementInstance {
    pub predictions: PredictionTensor,
    /// `true` for the output whose predictions agree.
    pub cluster_label: Vec<bool>,
    pub agreeing: usize,
    pub seed: u64,
}

/// For the agreeing output `j*`, each of the `n` predictions is
/// `normalize(μ + z / concentration)` with a shared unit direction `μ` and
/// `z ~ N(0, I)`. An infinite concentration gives identical votes.
pub fn gen_agreement_instance(
    n: usize,
    m: usize,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<SyntheticAgreementInstance, DataError> {
    if concentration.is_nan() || concentration <= 0.0 {
        return Err(DataError::Concentration(concentration));
    }
    PredictionTensor::zeros(n, m, k)?;
    let mut rng = rng(seed);
    let agreeing = rng.random_range(0..m);
    let mean = unit_sphere(&mut rng, k);
    let mut values = vec![0.0; n * m * k];
    for i in 0..n {
        for j in 0..m {
            let dst = &mut values[(i * m + j) * k..(i * m + j + 1) * k];
            if j == agreeing {
                for (d, mu) in dst.iter_mut().zip(&mean) {
                    let z: f64 = rng.sample(StandardNormal);
                    *d = mu + z / concentration;
                }
                let norm = math::norm(dst);
                for d in dst.iter_mut() {
                    *d /= norm;
                }
            } else {
                dst.copy_from_slice(&unit_sphere(&mut rng, k));
            }
        }
    }
    let mut cluster_label = vec![false; m];
    cluster_label[agreeing] = true;
    Ok(SyntheticAgreementInstance {
        predictions: PredictionTensor::new(n, m, k, values)?,
        cluster_label,
        agreeing,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::fm_agreement;

    #[test]
    fn same_seed_same_instance() {
        let a = gen_agreement_instance(8, 4, 9, 5.0, 3).unwrap();
        let b = gen_agreement_instance(8, 4, 9, 5.0, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_agreement_instance(8, 4, 9, 5.0, 4).unwrap();
        assert_ne!(a.predictions, c.predictions);
    }

    #[test]
    fn infinite_concentration_gives_identical_votes() {
        let inst = gen_agreement_instance(12, 3, 16, f64::INFINITY, 9).unwrap();
        let r = fm_agreement(&inst.predictions).unwrap();
        assert!((r.activation[inst.agreeing] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn clustered_output_wins_at_seed_42() {
        let inst = gen_agreement_instance(16, 10, 16, 10.0, 42).unwrap();
        let r = fm_agreement(&inst.predictions).unwrap();
        let star = r.activation[inst.agreeing];
        for (j, &a) in r.activation.iter().enumerate() {
            if j != inst.agreeing {
                assert!(star > a, "output {j}: {a} >= {star}");
            }
        }
    }

    #[test]
    fn rejects_non_positive_concentration() {
        assert_eq!(
            gen_agreement_instance(2, 2, 2, 0.0, 1).unwrap_err(),
            DataError::Concentration(0.0)
        );
        assert!(gen_agreement_instance(2, 2, 2, f64::NAN, 1).is_err());
    }

    #[test]
    fn sphere_points_are_unit() {
        let mut r = rng(5);
        for _ in 0..20 {
            assert!((math::norm(&unit_sphere(&mut r, 7)) - 1.0).abs() < 1e-15);
        }
    }
}
