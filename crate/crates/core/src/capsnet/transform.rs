use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::batchnorm::{batch_norm_backward, batch_norm_forward, BatchNorm, BnCache};
use super::{pose_side, CapsError, CapsuleSet};
use crate::math;
use crate::routing::PredictionTensor;
use crate::tensor::matmul_into;

/// Per-pair pose transforms `W_ij` (each √k×√k, stored `[i][j][row][col]`) and
/// the batch normalization applied to the resulting predictions, one channel
/// per (output j, feature f).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformWeights {
    n_in: usize,
    n_out: usize,
    k: usize,
    side: usize,
    pub matrices: Vec<f64>,
    pub bn: BatchNorm,
}

impl TransformWeights {
    /// Entries drawn i.i.d. from `U(−1/√side, 1/√side)`. The normalization
    /// scale γ starts at `1/√k`, so each normalized prediction vector starts
    /// with squared norm about 1 instead of `k`.
    pub fn init<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self, CapsError> {
        let side = pose_side(k)?;
        let bound = 1.0 / math::sqrt(side as f64);
        let matrices = (0..n_in * n_out * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut bn = BatchNorm::new(n_out * k);
        bn.gamma.fill(1.0 / math::sqrt(k as f64));
        Self::from_parts(n_in, n_out, k, matrices, bn)
    }

    /// Identity matrices and a pass-through normalization.
    pub fn identity(n_in: usize, n_out: usize, k: usize) -> Result<Self, CapsError> {
        let side = pose_side(k)?;
        let mut matrices = vec![0.0; n_in * n_out * k];
        for pair in matrices.chunks_mut(k) {
            for d in 0..side {
                pair[d * side + d] = 1.0;
            }
        }
        Self::from_parts(n_in, n_out, k, matrices, BatchNorm::pass_through(n_out * k))
    }

    pub fn from_parts(
        n_in: usize,
        n_out: usize,
        k: usize,
        matrices: Vec<f64>,
        bn: BatchNorm,
    ) -> Result<Self, CapsError> {
        let side = pose_side(k)?;
        if n_in == 0 || n_out == 0 {
            return Err(CapsError::Shape(
                "transform needs at least one input and output",
            ));
        }
        if matrices.len() != n_in * n_out * k {
            return Err(CapsError::Shape("matrices != n_in * n_out * k"));
        }
        let features = n_out * k;
        if bn.gamma.len() != features
            || bn.beta.len() != features
            || bn.running_mean.len() != features
            || bn.running_var.len() != features
        {
            return Err(CapsError::Shape("batch norm parameters != n_out * k"));
        }
        if bn.running_var.iter().any(|&v| v < 0.0) {
            return Err(CapsError::NonFiniteStats);
        }
        Ok(TransformWeights {
            n_in,
            n_out,
            k,
            side,
            matrices,
            bn,
        })
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

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn matrix(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.n_out + j) * self.k;
        &self.matrices[start..start + self.k]
    }

    /// Number of transform parameters: `n_in · n_out · k`.
    pub fn parameter_count(&self) -> usize {
        self.matrices.len()
    }

    /// What a full k×k matrix per pair would need: `n_in · n_out · k²`.
    pub fn full_matrix_parameter_count(&self) -> usize {
        self.n_in * self.n_out * self.k * self.k
    }
}

/// Reshape-multiply-reshape for every (example, input, output) triple.
/// `poses` is `[batch][n_in][k]`; the result is `[batch][n_in][n_out][k]`.
pub fn transform_predictions(
    poses: &[f64],
    batch: usize,
    w: &TransformWeights,
) -> Result<Vec<f64>, CapsError> {
    predict_raw(poses, batch, w.n_in, w.n_out, w.k, &w.matrices)
}

/// Cotangents of [`transform_predictions`] with respect to poses and matrices.
pub fn transform_predictions_backward(
    poses: &[f64],
    batch: usize,
    w: &TransformWeights,
    g_pred: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), CapsError> {
    predict_raw_backward(poses, batch, w.n_in, w.n_out, w.k, &w.matrices, g_pred)
}

pub(crate) fn predict_raw(
    poses: &[f64],
    batch: usize,
    n_in: usize,
    n_out: usize,
    k: usize,
    matrices: &[f64],
) -> Result<Vec<f64>, CapsError> {
    let side = pose_side(k)?;
    if poses.len() != batch * n_in * k || matrices.len() != n_in * n_out * k {
        return Err(CapsError::Shape("poses != batch * n_in * k"));
    }
    let mut out = vec![0.0; batch * n_in * n_out * k];
    for b in 0..batch {
        for i in 0..n_in {
            let u = &poses[(b * n_in + i) * k..(b * n_in + i + 1) * k];
            for j in 0..n_out {
                let dst = &mut out[((b * n_in + i) * n_out + j) * k..][..k];
                let m = &matrices[(i * n_out + j) * k..][..k];
                matmul_into(u, m, dst, side, side, side);
            }
        }
    }
    Ok(out)
}

pub(crate) fn predict_raw_backward(
    poses: &[f64],
    batch: usize,
    n_in: usize,
    n_out: usize,
    k: usize,
    matrices: &[f64],
    g_pred: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), CapsError> {
    let side = pose_side(k)?;
    if poses.len() != batch * n_in * k
        || matrices.len() != n_in * n_out * k
        || g_pred.len() != batch * n_in * n_out * k
    {
        return Err(CapsError::Shape("transform backward shapes"));
    }
    let mut g_poses = vec![0.0; poses.len()];
    let mut g_mats = vec![0.0; matrices.len()];
    for b in 0..batch {
        for i in 0..n_in {
            let u = &poses[(b * n_in + i) * k..][..k];
            for j in 0..n_out {
                let g = &g_pred[((b * n_in + i) * n_out + j) * k..][..k];
                let m = &matrices[(i * n_out + j) * k..][..k];
                let gu = &mut g_poses[(b * n_in + i) * k..][..k];
                // dU = dY · Wᵀ
                for r in 0..side {
                    for p in 0..side {
                        let mut acc = 0.0;
                        for c in 0..side {
                            acc += g[r * side + c] * m[p * side + c];
                        }
                        gu[r * side + p] += acc;
                    }
                }
                // dW = Uᵀ · dY
                let gw = &mut g_mats[(i * n_out + j) * k..][..k];
                for p in 0..side {
                    for c in 0..side {
                        let mut acc = 0.0;
                        for r in 0..side {
                            acc += u[r * side + p] * g[r * side + c];
                        }
                        gw[p * side + c] += acc;
                    }
                }
            }
        }
    }
    Ok((g_poses, g_mats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformCache {
    pub batch: usize,
    pub bn: BnCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformGrads {
    pub poses: Vec<f64>,
    pub matrices: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Prediction vectors for every example: matrix transform followed by batch
/// normalization over the (example, input capsule) rows.
pub fn matrix_transform(
    u: &CapsuleSet,
    w: &mut TransformWeights,
    training: bool,
) -> Result<(Vec<PredictionTensor>, TransformCache), CapsError> {
    let (flat, cache) = matrix_transform_flat(u, w, training)?;
    let per = w.n_in * w.n_out * w.k;
    let preds = flat
        .chunks(per)
        .map(|c| PredictionTensor::new(w.n_in, w.n_out, w.k, c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((preds, cache))
}

pub(crate) fn matrix_transform_flat(
    u: &CapsuleSet,
    w: &mut TransformWeights,
    training: bool,
) -> Result<(Vec<f64>, TransformCache), CapsError> {
    if u.k() != w.k || u.n() != w.n_in {
        return Err(CapsError::Shape(
            "capsule set does not match transform weights",
        ));
    }
    pose_side(u.k())?;
    let raw = transform_predictions(u.poses(), u.batch(), w)?;
    let rows = u.batch() * w.n_in;
    if training && u.batch() < 2 {
        return Err(CapsError::BatchTooSmall(u.batch()));
    }
    let (normed, bn) = batch_norm_forward(&raw, rows, &mut w.bn, training)?;
    Ok((
        normed,
        TransformCache {
            batch: u.batch(),
            bn,
        },
    ))
}

pub fn matrix_transform_backward(
    u: &CapsuleSet,
    w: &TransformWeights,
    cache: &TransformCache,
    g_pred: &[f64],
) -> Result<TransformGrads, CapsError> {
    let bn = batch_norm_backward(&cache.bn, g_pred)?;
    let (poses, matrices) = transform_predictions_backward(u.poses(), cache.batch, w, &bn.x)?;
    Ok(TransformGrads {
        poses,
        matrices,
        gamma: bn.gamma,
        beta: bn.beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_set(batch: usize, n: usize, k: usize, seed: u64) -> CapsuleSet {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let poses = (0..batch * n * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        CapsuleSet::new(batch, n, k, poses).unwrap()
    }

    #[test]
    fn identity_weights_pass_poses_through() {
        let u = random_set(3, 4, 16, 1);
        let mut w = TransformWeights::identity(4, 2, 16).unwrap();
        let (preds, _) = matrix_transform(&u, &mut w, false).unwrap();
        for (b, p) in preds.iter().enumerate() {
            for i in 0..4 {
                for j in 0..2 {
                    assert_eq!(p.vector(i, j), u.pose(b, i));
                }
            }
        }
    }

    #[test]
    fn parameter_count_is_k_per_pair() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let w = TransformWeights::init(32, 10, 16, &mut rng).unwrap();
        assert_eq!(w.side(), 4);
        assert_eq!(w.matrix(0, 0).len(), 16);
        assert_eq!(w.parameter_count(), 32 * 10 * 16);
        assert_eq!(w.full_matrix_parameter_count(), 32 * 10 * 256);
        let bound = 0.5;
        assert!(w.matrices.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn rejects_non_square_and_tiny_batches() {
        assert_eq!(
            TransformWeights::identity(2, 2, 8).unwrap_err(),
            CapsError::NonSquareDim(8)
        );
        let u = random_set(1, 2, 4, 3);
        let mut w = TransformWeights::identity(2, 2, 4).unwrap();
        assert_eq!(
            matrix_transform(&u, &mut w, true).unwrap_err(),
            CapsError::BatchTooSmall(1)
        );
    }

    #[test]
    fn equals_kronecker_structured_linear_map() {
        // Push each basis vector through a row-major reshape-multiply-reshape
        // and compare the resulting k×k map against the batched implementation.
        let k = 9;
        let side = 3;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let w = TransformWeights::init(2, 3, k, &mut rng).unwrap();
        let u = random_set(2, 2, k, 5);
        let got = transform_predictions(u.poses(), 2, &w).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let m = w.matrix(i, j);
                let mut full = vec![0.0; k * k];
                for col in 0..k {
                    let mut basis = vec![0.0; k];
                    basis[col] = 1.0;
                    for r in 0..side {
                        for c in 0..side {
                            let mut acc = 0.0;
                            for p in 0..side {
                                acc += basis[r * side + p] * m[p * side + c];
                            }
                            full[(r * side + c) * k + col] = acc;
                        }
                    }
                }
                for b in 0..2 {
                    let x = u.pose(b, i);
                    let start = ((b * 2 + i) * 3 + j) * k;
                    for row in 0..k {
                        let mut acc = 0.0;
                        for col in 0..k {
                            acc += full[row * k + col] * x[col];
                        }
                        assert_eq!(got[start + row], acc);
                    }
                }
            }
        }
    }
}
