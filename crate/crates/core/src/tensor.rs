//! Dense row-major `f64` arrays.
//!
//! Only what the routing pipeline needs: element-wise product, single-axis
//! sums, small matrix products and the Euclidean norm. Every reduction walks
//! its input in ascending index order, so identical inputs give bit-identical
//! outputs.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dimension sizes must be at least 1, got shape {0:?}")]
    EmptyDimension(Vec<usize>),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error(
        "matrix product needs rank-2 operands with matching inner dimension, got {0:?} x {1:?}"
    )]
    MatmulDims(Vec<usize>, Vec<usize>),
}

/// A dense tensor with row-major contiguous storage.
///
/// `shape.iter().product() == data.len()` and every dimension is at least 1.
/// A rank-0 tensor holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::EmptyDimension(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let len = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A rank-1 tensor over `data`. Panics on an empty slice.
    pub fn vector(data: &[f64]) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Result<Self, TensorError> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for d in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.shape[d + 1];
        }
        strides
    }

    /// Element at a multi-index, or `None` when the index is out of bounds.
    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut offset = 0;
        for ((&i, &d), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= d {
                return None;
            }
            offset += i * s;
        }
        Some(self.data[offset])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-wise (Hadamard) product.
    pub fn elementwise_mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(
                self.shape.clone(),
                other.shape.clone(),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sums over `axis`, dropping it from the shape. Terms are accumulated in
    /// ascending index along the axis.
    pub fn reduce_sum(&self, axis: usize) -> Result<Tensor, TensorError> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Inverse of [`reduce_sum`](Self::reduce_sum) for cotangents: repeats
    /// `self` `len` times along a new `axis`.
    pub fn broadcast_axis(&self, axis: usize, len: usize) -> Result<Tensor, TensorError> {
        let rank = self.shape.len();
        if axis > rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, len);
        check_shape(&shape)?;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..len {
                data.extend_from_slice(src);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Matrix product of two rank-2 tensors. Written for the √k×√k pose
    /// matrices but correct for any size.
    pub fn matmul_small(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::MatmulDims(
                self.shape.clone(),
                other.shape.clone(),
            ));
        }
        let (r, c, d) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * d];
        matmul_into(&self.data, &other.data, &mut out, r, c, d);
        Ok(Tensor {
            shape: vec![r, d],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::MatmulDims(self.shape.clone(), Vec::new()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&self) -> f64 {
        math::norm(&self.data)
    }
}

/// `out += a · b` for row-major `a: r×c`, `b: c×d`, `out: r×d`.
///
/// For each output entry the `c` products are accumulated in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, c: usize, d: usize) {
    for i in 0..r {
        let row = &mut out[i * d..(i + 1) * d];
        for p in 0..c {
            let aip = a[i * c + p];
            let brow = &b[p * d..(p + 1) * d];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::EmptyDimension(_))
        ));
    }

    #[test]
    fn elementwise_mul_examples() {
        let a = Tensor::vector(&[1.0, 2.0, 3.0]);
        let b = Tensor::vector(&[4.0, 5.0, 6.0]);
        assert_eq!(a.elementwise_mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);

        let x = random(vec![3, 4], 1);
        let ones = Tensor::ones(x.shape().to_vec()).unwrap();
        assert_eq!(x.elementwise_mul(&ones).unwrap(), x);

        let err = a.elementwise_mul(&Tensor::vector(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch(..)));
    }

    #[test]
    fn elementwise_mul_matches_loop_and_commutes() {
        let a = random(vec![4], 2);
        let b = random(vec![4], 3);
        let got = a.elementwise_mul(&b).unwrap();
        for i in 0..4 {
            assert_eq!(got.data()[i], a.data()[i] * b.data()[i]);
        }
        assert_eq!(got, b.elementwise_mul(&a).unwrap());
    }

    #[test]
    fn reduce_sum_examples() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = t.reduce_sum(0).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);

        let col = Tensor::new(vec![3, 1], vec![1.5, -2.0, 0.25]).unwrap();
        let sq = col.reduce_sum(1).unwrap();
        assert_eq!(sq.shape(), &[3]);
        assert_eq!(sq.data(), col.data());

        assert!(matches!(
            t.reduce_sum(2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn reduce_sum_matches_naive_double_loop() {
        let t = random(vec![7, 5], 4);
        let rows = t.reduce_sum(1).unwrap();
        let cols = t.reduce_sum(0).unwrap();
        for i in 0..7 {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += t.get(&[i, j]).unwrap();
            }
            assert_eq!(rows.data()[i], acc);
        }
        for j in 0..5 {
            let mut acc = 0.0;
            for i in 0..7 {
                acc += t.get(&[i, j]).unwrap();
            }
            assert_eq!(cols.data()[j], acc);
        }
    }

    #[test]
    fn broadcast_undoes_reduce_shape() {
        let t = random(vec![2, 3], 5);
        let b = t.broadcast_axis(1, 4).unwrap();
        assert_eq!(b.shape(), &[2, 4, 3]);
        assert_eq!(b.get(&[1, 3, 2]), t.get(&[1, 2]));
    }

    #[test]
    fn matmul_examples() {
        let m = random(vec![4, 4], 6);
        assert_eq!(Tensor::eye(4).unwrap().matmul_small(&m).unwrap(), m);

        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(a.matmul_small(&b).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);

        let bad = Tensor::zeros(vec![3, 2]).unwrap();
        assert!(matches!(
            a.matmul_small(&bad),
            Err(TensorError::MatmulDims(..))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(vec![4, 4], 7);
        let b = random(vec![4, 4], 8);
        let got = a.matmul_small(&b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 4 + j];
                }
                assert_eq!(got.data()[i * 4 + j], acc);
            }
        }
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(Tensor::vector(&[3.0, 4.0]).l2_norm(), 5.0);
        assert_eq!(Tensor::zeros(vec![5]).unwrap().l2_norm(), 0.0);

        let t = random(vec![16], 9);
        let mut acc = 0.0;
        for x in t.data() {
            acc += x * x;
        }
        let oracle = std::primitive::f64::sqrt(acc);
        assert!(((t.l2_norm() - oracle) / oracle).abs() < 1e-15);
    }

    #[test]
    fn reductions_are_deterministic() {
        let t = random(vec![6, 9], 10);
        let a = t.reduce_sum(0).unwrap();
        let b = t.reduce_sum(0).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
