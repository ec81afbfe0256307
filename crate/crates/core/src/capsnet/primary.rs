use alloc::vec;
use alloc::vec::Vec;

use super::{CapsError, CapsuleSet};
use crate::routing::{squash_backward, squash_into};
use crate::tensor::Tensor;

/// Groups each row of a `[batch, width]` feature matrix into `width / k`
/// capsules of `k` features and squashes every capsule.
pub fn primary_caps(features: &Tensor, k: usize) -> Result<CapsuleSet, CapsError> {
    let (batch, width) = match *features.shape() {
        [batch, width] => (batch, width),
        _ => {
            return Err(CapsError::Shape(
                "primary capsules expect [batch, width] features",
            ))
        }
    };
    if k == 0 || width % k != 0 {
        return Err(CapsError::IndivisibleWidth { width, k });
    }
    let mut poses = vec![0.0; batch * width];
    for (src, dst) in features.data().chunks(k).zip(poses.chunks_mut(k)) {
        squash_into(src, dst);
    }
    CapsuleSet::new(batch, width / k, k, poses)
}

/// Cotangent of [`primary_caps`] with respect to the flat features.
pub fn primary_caps_backward(
    features: &Tensor,
    k: usize,
    g_caps: &[f64],
) -> Result<Vec<f64>, CapsError> {
    if k == 0 || !features.len().is_multiple_of(k) {
        return Err(CapsError::IndivisibleWidth {
            width: features.len(),
            k,
        });
    }
    if g_caps.len() != features.len() {
        return Err(CapsError::Shape("primary capsule cotangent length"));
    }
    let mut out = Vec::with_capacity(features.len());
    for (src, g) in features.data().chunks(k).zip(g_caps.chunks(k)) {
        out.extend(squash_backward(src, g));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    #[test]
    fn groups_and_squashes() {
        let data: Vec<f64> = (0..64).map(|x| (x as f64 * 0.37).sin()).collect();
        let t = Tensor::new(vec![2, 32], data).unwrap();
        let caps = primary_caps(&t, 16).unwrap();
        assert_eq!((caps.batch(), caps.n(), caps.k()), (2, 2, 16));
        for b in 0..2 {
            for i in 0..2 {
                assert!(math::norm(caps.pose(b, i)) < 1.0);
            }
        }
    }

    #[test]
    fn zero_features_give_zero_capsules() {
        let t = Tensor::zeros(vec![3, 32]).unwrap();
        let caps = primary_caps(&t, 16).unwrap();
        assert!(caps.poses().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let t = Tensor::zeros(vec![1, 30]).unwrap();
        assert_eq!(
            primary_caps(&t, 16).unwrap_err(),
            CapsError::IndivisibleWidth { width: 30, k: 16 }
        );
    }

    #[test]
    fn matches_scalar_reference() {
        let data: Vec<f64> = (0..48)
            .map(|x| ((x * 31 % 17) as f64 - 8.0) / 5.0)
            .collect();
        let t = Tensor::new(vec![1, 48], data.clone()).unwrap();
        let caps = primary_caps(&t, 16).unwrap();
        for c in 0..3 {
            let mut sq = 0.0;
            for f in 0..16 {
                sq += data[c * 16 + f] * data[c * 16 + f];
            }
            let r = std::primitive::f64::sqrt(sq);
            for f in 0..16 {
                let want = sq / (1.0 + sq) * data[c * 16 + f] / r;
                assert!((caps.pose(0, c)[f] - want).abs() < 1e-15);
            }
        }
    }
}
