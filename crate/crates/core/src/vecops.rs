//! Small dense-vector helpers shared by the solvers.

use crate::scalar::Scalar;

/// Dot product.
#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    assert_eq!(x.len(), y.len(), "dot: length mismatch");
    T::dot(x, y)
}

/// Euclidean norm.
#[inline]
pub fn norm2<T: Scalar>(x: &[T]) -> T {
    T::dot(x, x).sqrt()
}

/// y += alpha * x
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    assert_eq!(x.len(), y.len(), "axpy: length mismatch");
    T::axpy(alpha, x, y);
}

/// out = x - y
#[inline]
pub fn sub<T: Scalar>(x: &[T], y: &[T]) -> Vec<T> {
    assert_eq!(x.len(), y.len(), "sub: length mismatch");
    x.iter().zip(y).map(|(a, b)| *a - *b).collect()
}

/// In-place scale.
#[inline]
pub fn scale<T: Scalar>(alpha: T, x: &mut [T]) {
    for v in x {
        *v = *v * alpha;
    }
}

/// True when every entry is finite.
#[inline]
pub fn all_finite<T: Scalar>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_of_3_4() {
        assert!((norm2(&[3.0f64, 4.0]) - 5.0).abs() < 1e-15);
        assert!((norm2(&[3.0f32, 4.0]) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn axpy_accumulates() {
        let mut y = vec![1.0f64, 2.0];
        axpy(2.0, &[10.0, 20.0], &mut y);
        assert_eq!(y, vec![21.0, 42.0]);
    }
}
