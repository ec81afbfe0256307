use alloc::vec::Vec;

use super::transform::{matrix_transform_backward, matrix_transform_flat, TransformCache};
use super::{CapsError, CapsuleSet, TransformWeights};
use crate::routing::{
    dynamic_routing, dynamic_routing_backward, fm_agreement, fm_agreement_backward,
    DynamicRoutingConfig, PredictionTensor, RoutingCotangent, RoutingResult,
};

/// Which agreement rule a capsule layer routes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingAlgorithm {
    Fm,
    Dynamic(DynamicRoutingConfig),
}

impl RoutingAlgorithm {
    pub fn route(&self, u: &PredictionTensor) -> Result<RoutingResult, CapsError> {
        Ok(match self {
            RoutingAlgorithm::Fm => fm_agreement(u)?,
            RoutingAlgorithm::Dynamic(cfg) => dynamic_routing(u, *cfg)?,
        })
    }

    pub fn backward(
        &self,
        u: &PredictionTensor,
        upstream: &RoutingCotangent,
    ) -> Result<PredictionTensor, CapsError> {
        Ok(match self {
            RoutingAlgorithm::Fm => fm_agreement_backward(u, upstream)?,
            RoutingAlgorithm::Dynamic(cfg) => dynamic_routing_backward(u, *cfg, upstream)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub predictions: Vec<PredictionTensor>,
    pub transform: TransformCache,
    pub algorithm: RoutingAlgorithm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub poses: Vec<f64>,
    pub matrices: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Matrix transform followed by routing, one [`RoutingResult`] per example.
pub fn capsule_layer_forward(
    u: &CapsuleSet,
    w: &mut TransformWeights,
    algorithm: RoutingAlgorithm,
    training: bool,
) -> Result<(Vec<RoutingResult>, LayerCache), CapsError> {
    let (flat, transform) = matrix_transform_flat(u, w, training)?;
    let per = w.n_in() * w.n_out() * w.k();
    let predictions = flat
        .chunks(per)
        .map(|c| PredictionTensor::new(w.n_in(), w.n_out(), w.k(), c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let results = predictions
        .iter()
        .map(|p| algorithm.route(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        results,
        LayerCache {
            predictions,
            transform,
            algorithm,
        },
    ))
}

pub fn capsule_layer_backward(
    u: &CapsuleSet,
    w: &TransformWeights,
    cache: &LayerCache,
    upstream: &[RoutingCotangent],
) -> Result<LayerGrads, CapsError> {
    if upstream.len() != cache.predictions.len() {
        return Err(CapsError::Shape("one cotangent per example"));
    }
    let mut g_pred = Vec::with_capacity(cache.predictions.len() * w.n_in() * w.n_out() * w.k());
    for (p, cot) in cache.predictions.iter().zip(upstream) {
        g_pred.extend_from_slice(cache.algorithm.backward(p, cot)?.values());
    }
    let g = matrix_transform_backward(u, w, &cache.transform, &g_pred)?;
    Ok(LayerGrads {
        poses: g.poses,
        matrices: g.matrices,
        gamma: g.gamma,
        beta: g.beta,
    })
}

/// The routed capsules `ŝ_j` of each example, as input to the next layer.
pub fn next_layer_input(results: &[RoutingResult]) -> Result<CapsuleSet, CapsError> {
    let first = results.first().ok_or(CapsError::Shape("empty batch"))?;
    let (n, k) = (first.n_out(), first.k());
    let mut poses = Vec::with_capacity(results.len() * n * k);
    for r in results {
        if r.n_out() != n || r.k() != k {
            return Err(CapsError::Shape("ragged routing results"));
        }
        poses.extend_from_slice(&r.s_hat);
    }
    CapsuleSet::new(results.len(), n, k, poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn single_input_capsule_has_zero_activation() {
        let u = CapsuleSet::new(1, 1, 4, vec![0.1, -0.4, 0.3, 0.2]).unwrap();
        let mut w = TransformWeights::identity(1, 3, 4).unwrap();
        let (results, _) = capsule_layer_forward(&u, &mut w, RoutingAlgorithm::Fm, false).unwrap();
        assert_eq!(results[0].activation, vec![0.0; 3]);
    }

    #[test]
    fn three_layer_stack_runs_end_to_end() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let batch = 4;
        let poses = (0..batch * 32 * 16)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let u = CapsuleSet::new(batch, 32, 16, poses).unwrap();
        let mut w1 = TransformWeights::init(32, 16, 16, &mut rng).unwrap();
        let mut w2 = TransformWeights::init(16, 10, 16, &mut rng).unwrap();
        let (mid, _) = capsule_layer_forward(&u, &mut w1, RoutingAlgorithm::Fm, true).unwrap();
        let next = next_layer_input(&mid).unwrap();
        assert_eq!((next.batch(), next.n(), next.k()), (batch, 16, 16));
        assert_eq!(
            next.poses(),
            &mid.iter().flat_map(|r| r.s_hat.clone()).collect::<Vec<_>>()[..]
        );
        let (out, _) = capsule_layer_forward(&next, &mut w2, RoutingAlgorithm::Fm, true).unwrap();
        assert_eq!(out.len(), batch);
        assert!(out.iter().all(|r| r.n_out() == 10 && r.k() == 16));
    }
}
