//! `v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Squash into a caller-owned buffer. The zero vector maps to zero.
pub fn squash_into(s: &[f64], out: &mut [f64]) {
    let r = math::norm(s);
    let factor = r / (1.0 + r * r);
    for (o, x) in out.iter_mut().zip(s) {
        *o = x * factor;
    }
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    squash_into(s, &mut out);
    out
}

/// Vector-Jacobian product of [`squash`].
///
/// With `φ(r) = r / (1 + r²)`, `v = φ(r)·s` and
/// `∂v/∂s = φ·I + (φ'(r)/r)·s sᵀ`, where `φ' = (1 − r²)/(1 + r²)²`.
pub fn squash_backward(s: &[f64], g_v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    squash_backward_into(s, g_v, &mut out);
    out
}

pub(crate) fn squash_backward_into(s: &[f64], g_v: &[f64], out: &mut [f64]) {
    let r2 = math::sum_sq(s);
    let r = math::sqrt(r2);
    if r == 0.0 {
        out.fill(0.0);
        return;
    }
    let denom = 1.0 + r2;
    let phi = r / denom;
    let dphi_over_r = (1.0 - r2) / (denom * denom * r);
    let dot = math::dot(s, g_v);
    for ((o, &x), &g) in out.iter_mut().zip(s).zip(g_v) {
        *o = phi * g + dphi_over_r * dot * x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);

        let u = [0.6, 0.8];
        let v = squash(&u);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);

        let s = [0.0, 3.0, 0.0];
        assert!((math::norm(&squash(&s)) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn keeps_direction() {
        let s = [1.0, -2.0, 0.5, 4.0];
        let v = squash(&s);
        let cos = math::dot(&s, &v) / (math::norm(&s) * math::norm(&v));
        assert!((cos - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_at_zero_is_zero() {
        assert_eq!(squash_backward(&[0.0, 0.0], &[1.0, -1.0]), vec![0.0, 0.0]);
    }
}
