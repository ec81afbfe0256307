use alloc::vec::Vec;

use super::CapsError;
use crate::math;

/// Per-class hinge-squared loss parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLossParams {
    /// Down-weights absent classes.
    pub lambda: f64,
    pub m_plus: f64,
    pub m_minus: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams {
            lambda: 0.5,
            m_plus: 0.9,
            m_minus: 0.1,
        }
    }
}

impl MarginLossParams {
    pub fn new(lambda: f64, m_plus: f64, m_minus: f64) -> Result<Self, CapsError> {
        if !(lambda > 0.0 && 0.0 <= m_minus && m_minus < m_plus && m_plus <= 1.0) {
            return Err(CapsError::InvalidMarginParams);
        }
        Ok(MarginLossParams {
            lambda,
            m_plus,
            m_minus,
        })
    }
}

/// `Σ_j T_j·max(0, m⁺ − a_j)² + λ(1 − T_j)·max(0, a_j − m⁻)²`.
pub fn margin_loss(activations: &[f64], targets: &[bool], params: &MarginLossParams) -> f64 {
    activations
        .iter()
        .zip(targets)
        .map(|(&a, &present)| {
            if present {
                let d = (params.m_plus - a).max(0.0);
                d * d
            } else {
                let d = (a - params.m_minus).max(0.0);
                params.lambda * d * d
            }
        })
        .sum()
}

pub fn margin_loss_grad(
    activations: &[f64],
    targets: &[bool],
    params: &MarginLossParams,
) -> Vec<f64> {
    activations
        .iter()
        .zip(targets)
        .map(|(&a, &present)| {
            if present {
                -2.0 * (params.m_plus - a).max(0.0)
            } else {
                2.0 * params.lambda * (a - params.m_minus).max(0.0)
            }
        })
        .collect()
}

fn softmax(activations: &[f64]) -> Vec<f64> {
    let max = activations
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = activations.iter().map(|&a| math::exp(a - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_label(activations: &[f64], label: usize) -> Result<(), CapsError> {
    if activations.len() < 2 {
        return Err(CapsError::TooFewClasses(activations.len()));
    }
    if label >= activations.len() {
        return Err(CapsError::LabelOutOfRange {
            label,
            classes: activations.len(),
        });
    }
    Ok(())
}

/// `−log softmax(a)[label]`, computed as `logsumexp(a − max) − (a_label − max)`.
pub fn softmax_cross_entropy(activations: &[f64], label: usize) -> Result<f64, CapsError> {
    check_label(activations, label)?;
    let max = activations
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = activations.iter().map(|&a| math::exp(a - max)).sum();
    Ok(math::ln(total) - (activations[label] - max))
}

/// `softmax(a) − one_hot(label)`.
pub fn softmax_cross_entropy_grad(
    activations: &[f64],
    label: usize,
) -> Result<Vec<f64>, CapsError> {
    check_label(activations, label)?;
    let mut g = softmax(activations);
    g[label] -= 1.0;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_golden_values() {
        let p = MarginLossParams::default();
        assert_eq!(margin_loss(&[0.9], &[true], &p), 0.0);
        assert!((margin_loss(&[0.0], &[true], &p) - 0.81).abs() < 1e-12);
        assert!((margin_loss(&[0.9], &[false], &p) - 0.32).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_iff_margins_met() {
        let p = MarginLossParams::default();
        assert_eq!(
            margin_loss(&[0.95, 0.05, -0.3], &[true, false, false], &p),
            0.0
        );
        assert!(margin_loss(&[0.95, 0.15], &[true, false], &p) > 0.0);
    }

    #[test]
    fn margin_params_validated() {
        assert!(MarginLossParams::new(0.5, 0.9, 0.1).is_ok());
        assert!(MarginLossParams::new(0.0, 0.9, 0.1).is_err());
        assert!(MarginLossParams::new(0.5, 0.1, 0.9).is_err());
        assert!(MarginLossParams::new(0.5, 1.1, 0.1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = [0.3; 10];
        let l = softmax_cross_entropy(&uniform, 4).unwrap();
        assert!((l - core::f64::consts::LN_10).abs() < 1e-12);

        let mut peaked = [0.0; 10];
        peaked[7] = 1000.0;
        assert!(softmax_cross_entropy(&peaked, 7).unwrap() < 1e-9);

        assert_eq!(
            softmax_cross_entropy(&uniform, 10).unwrap_err(),
            CapsError::LabelOutOfRange {
                label: 10,
                classes: 10
            }
        );
        assert_eq!(
            softmax_cross_entropy(&[1.0], 0).unwrap_err(),
            CapsError::TooFewClasses(1)
        );
    }

    #[test]
    fn cross_entropy_grad_sums_to_zero() {
        let g = softmax_cross_entropy_grad(&[0.2, -1.0, 3.0], 1).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(g[1] < 0.0);
    }
}
