//! Capsule-layer machinery around routing.
//!
//! A layer maps input capsules `u_i` (k-vectors, k a perfect square) to
//! prediction vectors by reshaping each capsule into a √k×√k matrix,
//! right-multiplying it by a per-pair matrix `W_ij`, flattening back to k and
//! batch-normalizing. The predictions are then routed. Chained layers feed the
//! routed capsules `ŝ_j` (not the poses) to the next layer.

mod batchnorm;
mod layer;
mod loss;
mod model;
mod primary;
mod transform;

use alloc::vec::Vec;

pub use batchnorm::{batch_norm_backward, batch_norm_forward, BatchNorm, BnCache, BnGrads};
pub use layer::{
    capsule_layer_backward, capsule_layer_forward, next_layer_input, LayerCache, LayerGrads,
    RoutingAlgorithm,
};
pub use loss::{
    margin_loss, margin_loss_grad, softmax_cross_entropy, softmax_cross_entropy_grad,
    MarginLossParams,
};
pub use model::{count_correct, DeskModel, DeskModelConfig, LossMode, StepOutput};
pub use primary::{primary_caps, primary_caps_backward};
pub use transform::{
    matrix_transform, matrix_transform_backward, transform_predictions,
    transform_predictions_backward, TransformCache, TransformGrads, TransformWeights,
};
pub(crate) use transform::{predict_raw, predict_raw_backward};

use crate::routing::RoutingError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CapsError {
    #[error("capsule dimension {0} is not a perfect square")]
    NonSquareDim(usize),
    #[error("batch normalization in training mode needs at least 2 examples, got {0}")]
    BatchTooSmall(usize),
    #[error("batch normalization statistics are not finite")]
    NonFiniteStats,
    #[error("feature width {width} is not divisible by capsule dimension {k}")]
    IndivisibleWidth { width: usize, k: usize },
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("softmax cross entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid margin loss parameters")]
    InvalidMarginParams,
    #[error("non-finite capsule pose")]
    NonFinite,
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Poses `u_i` for a batch, laid out `[batch][n][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleSet {
    batch: usize,
    n: usize,
    k: usize,
    poses: Vec<f64>,
}

impl CapsuleSet {
    pub fn new(batch: usize, n: usize, k: usize, poses: Vec<f64>) -> Result<Self, CapsError> {
        if batch == 0 || n == 0 || k == 0 {
            return Err(CapsError::Shape("capsule set dimensions must be positive"));
        }
        if poses.len() != batch * n * k {
            return Err(CapsError::Shape("capsule set length != batch * n * k"));
        }
        if poses.iter().any(|x| !x.is_finite()) {
            return Err(CapsError::NonFinite);
        }
        Ok(CapsuleSet { batch, n, k, poses })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn poses(&self) -> &[f64] {
        &self.poses
    }

    pub fn pose(&self, b: usize, i: usize) -> &[f64] {
        let start = (b * self.n + i) * self.k;
        &self.poses[start..start + self.k]
    }
}

/// Side length of the pose matrix for a k-vector capsule.
pub fn pose_side(k: usize) -> Result<usize, CapsError> {
    let mut side = 0usize;
    while (side + 1) * (side + 1) <= k {
        side += 1;
    }
    if side == 0 || side * side != k {
        return Err(CapsError::NonSquareDim(k));
    }
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_side_requires_square() {
        assert_eq!(pose_side(16), Ok(4));
        assert_eq!(pose_side(9), Ok(3));
        assert_eq!(pose_side(1), Ok(1));
        assert_eq!(pose_side(8), Err(CapsError::NonSquareDim(8)));
        assert_eq!(pose_side(0), Err(CapsError::NonSquareDim(0)));
    }
}
