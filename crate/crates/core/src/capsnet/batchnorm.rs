use alloc::vec;
use alloc::vec::Vec;

use super::CapsError;
use crate::math;

/// Per-feature batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// γ = 1, β = 0, running mean 0 and running variance 1.
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// A layer whose inference path is exactly the identity: γ = 1, β = 0,
    /// running mean 0, running variance 1 and ε = 0.
    pub fn pass_through(features: usize) -> Self {
        BatchNorm {
            eps: 0.0,
            ..Self::new(features)
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub rows: usize,
    pub training: bool,
    pub inv_std: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Normalizes each column of the row-major `rows × features` matrix `x`.
///
/// Training mode uses the batch mean and biased batch variance and then
/// updates `running ← momentum·running + (1 − momentum)·batch`. Inference mode
/// only reads the running statistics.
pub fn batch_norm_forward(
    x: &[f64],
    rows: usize,
    params: &mut BatchNorm,
    training: bool,
) -> Result<(Vec<f64>, BnCache), CapsError> {
    let features = params.features();
    if x.len() != rows * features {
        return Err(CapsError::Shape("batch norm input != rows * features"));
    }
    let (mean, var) = if training {
        if rows < 2 {
            return Err(CapsError::BatchTooSmall(rows));
        }
        let mut mean = vec![0.0; features];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&x[r * features..(r + 1) * features]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; features];
        for r in 0..rows {
            let row = &x[r * features..(r + 1) * features];
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= rows as f64;
        }
        (mean, var)
    } else {
        (params.running_mean.clone(), params.running_var.clone())
    };
    if mean.iter().chain(&var).any(|v| !v.is_finite()) {
        return Err(CapsError::NonFiniteStats);
    }

    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / math::sqrt(v + params.eps))
        .collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        for f in 0..features {
            let idx = r * features + f;
            x_hat[idx] = (x[idx] - mean[f]) * inv_std[f];
            y[idx] = x_hat[idx] * params.gamma[f] + params.beta[f];
        }
    }

    if training {
        let mom = params.momentum;
        for f in 0..features {
            params.running_mean[f] = mom * params.running_mean[f] + (1.0 - mom) * mean[f];
            params.running_var[f] = mom * params.running_var[f] + (1.0 - mom) * var[f];
        }
    }

    let cache = BnCache {
        rows,
        training,
        inv_std,
        x_hat,
        gamma: params.gamma.clone(),
    };
    Ok((y, cache))
}

pub fn batch_norm_backward(cache: &BnCache, g_y: &[f64]) -> Result<BnGrads, CapsError> {
    let features = cache.gamma.len();
    let rows = cache.rows;
    if g_y.len() != rows * features {
        return Err(CapsError::Shape("batch norm cotangent != rows * features"));
    }
    let mut g_gamma = vec![0.0; features];
    let mut g_beta = vec![0.0; features];
    for r in 0..rows {
        for f in 0..features {
            let idx = r * features + f;
            g_gamma[f] += g_y[idx] * cache.x_hat[idx];
            g_beta[f] += g_y[idx];
        }
    }

    let mut g_x = vec![0.0; g_y.len()];
    if cache.training {
        // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = γ·dy
        let nf = rows as f64;
        for f in 0..features {
            let sum_g = cache.gamma[f] * g_beta[f];
            let sum_gx = cache.gamma[f] * g_gamma[f];
            for r in 0..rows {
                let idx = r * features + f;
                let g_hat = cache.gamma[f] * g_y[idx];
                g_x[idx] = cache.inv_std[f] / nf * (nf * g_hat - sum_g - cache.x_hat[idx] * sum_gx);
            }
        }
    } else {
        for r in 0..rows {
            for f in 0..features {
                let idx = r * features + f;
                g_x[idx] = cache.gamma[f] * cache.inv_std[f] * g_y[idx];
            }
        }
    }
    Ok(BnGrads {
        x: g_x,
        gamma: g_gamma,
        beta: g_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_stats(y: &[f64], rows: usize, features: usize, f: usize) -> (f64, f64) {
        let mean = (0..rows).map(|r| y[r * features + f]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (y[r * features + f] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        (mean, var)
    }

    #[test]
    fn training_output_is_standardized() {
        let rows = 6;
        let x: Vec<f64> = (0..rows * 3)
            .map(|i| ((i * 7919) % 13) as f64 * 0.37 - 2.0)
            .collect();
        let mut bn = BatchNorm::new(3);
        bn.eps = 0.0;
        let (y, _) = batch_norm_forward(&x, rows, &mut bn, true).unwrap();
        for f in 0..3 {
            let (mean, var) = column_stats(&y, rows, 3, f);
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_column_maps_to_beta() {
        let x = vec![0.3, 1.0, 0.3, 2.0, 0.3, 4.0];
        let mut bn = BatchNorm::new(2);
        bn.beta = vec![0.25, -1.0];
        let (y, _) = batch_norm_forward(&x, 3, &mut bn, true).unwrap();
        for r in 0..3 {
            assert!((y[r * 2] - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = vec![1.0, 3.0];
        let mut bn = BatchNorm::new(1);
        batch_norm_forward(&x, 2, &mut bn, true).unwrap();
        assert!((bn.running_mean[0] - 0.01 * 2.0).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn inference_ignores_batch_and_state() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = vec![1.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        bn.eps = 0.0;
        let before = bn.clone();
        let (y, _) = batch_norm_forward(&[3.0, 0.0], 1, &mut bn, false).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        assert_eq!(bn, before);
    }

    #[test]
    fn training_needs_two_rows() {
        let mut bn = BatchNorm::new(2);
        assert_eq!(
            batch_norm_forward(&[1.0, 2.0], 1, &mut bn, true).unwrap_err(),
            CapsError::BatchTooSmall(1)
        );
    }

    #[test]
    fn non_finite_stats_rejected() {
        let mut bn = BatchNorm::new(1);
        bn.running_var = vec![f64::NAN];
        assert_eq!(
            batch_norm_forward(&[1.0], 1, &mut bn, false).unwrap_err(),
            CapsError::NonFiniteStats
        );
    }
}
