//! Float intrinsics that are not in `core`.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Sum of squares in ascending index order.
#[inline]
pub(crate) fn sum_sq(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x * x;
    }
    acc
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn norm(xs: &[f64]) -> f64 {
    sqrt(sum_sq(xs))
}
