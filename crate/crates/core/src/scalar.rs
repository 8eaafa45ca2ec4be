//! Floating-point abstraction for the numeric kernels.
//!
//! Everything numerical in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. The experiment drivers instantiate `f64`
//! (see the aliases at the crate root); `f32` stays available for callers
//! that want the smaller footprint.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftNum;
use std::fmt::{Display, LowerExp};
use std::iter::Sum;

use crate::simd;

/// Scalar type the solvers, operators and training code are generic over.
pub trait Scalar:
    Float
    + FloatConst
    + FftNum
    + NumAssign
    + FromPrimitive
    + Sum
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Shorthand for converting an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    /// Standard-normal draw. Both impls consume one `f64` draw from the
    /// stream so that f32/f64 runs see the same underlying sequence.
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let v: f64 = StandardNormal.sample(rng);
        Self::lit(v)
    }

    /// exp(x) with relative accuracy ~1e-13, tuned for bulk activation work.
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    /// y += alpha * x
    #[inline]
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = *yi + alpha * *xi;
        }
    }

    /// Dot product of two equally long slices.
    #[inline]
    fn dot(x: &[Self], y: &[Self]) -> Self {
        debug_assert_eq!(x.len(), y.len());
        let mut acc = Self::zero();
        for (xi, yi) in x.iter().zip(y) {
            acc = acc + *xi * *yi;
        }
        acc
    }

    /// Split-complex axpy: (yr + i·yi) += (ar + i·ai) · (xr + i·xi), elementwise.
    #[inline]
    fn caxpy(ar: Self, ai: Self, xr: &[Self], xi: &[Self], yr: &mut [Self], yi: &mut [Self]) {
        for j in 0..xr.len() {
            let re = ar * xr[j] - ai * xi[j];
            let im = ar * xi[j] + ai * xr[j];
            yr[j] = yr[j] + re;
            yi[j] = yi[j] + im;
        }
    }

    /// Split-complex conjugated dot: sum_j x_j * conj(y_j), returned as (re, im).
    #[inline]
    fn cdotc(xr: &[Self], xi: &[Self], yr: &[Self], yi: &[Self]) -> (Self, Self) {
        let mut re = Self::zero();
        let mut im = Self::zero();
        for j in 0..xr.len() {
            re = re + xr[j] * yr[j] + xi[j] * yi[j];
            im = im + xi[j] * yr[j] - xr[j] * yi[j];
        }
        (re, im)
    }

    /// GeLU (tanh form) applied in place, derivative written to `d`.
    #[inline]
    fn gelu_slice(z: &mut [Self], d: &mut [Self]) {
        let c0 = Self::lit(crate::simd::GELU_C0);
        let c1 = Self::lit(crate::simd::GELU_C1);
        let c1x3 = Self::lit(3.0 * crate::simd::GELU_C1);
        let half = Self::lit(0.5);
        let one = Self::one();
        for i in 0..z.len() {
            let x = z[i];
            let g = c0 * (x + c1 * x * x * x);
            let two_g = (g + g).max(Self::lit(-40.0)).min(Self::lit(40.0));
            let e = two_g.exp_fast();
            let t = one - (one + one) / (e + one);
            z[i] = half * x * (one + t);
            d[i] = half * (one + t) + half * x * (one - t * t) * (c0 * (one + c1x3 * x * x));
        }
    }
}

impl Scalar for f32 {}

impl Scalar for f64 {
    #[inline]
    fn exp_fast(self) -> Self {
        simd::exp_fast_f64(self)
    }

    #[inline]
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        simd::axpy_f64(alpha, x, y);
    }

    #[inline]
    fn dot(x: &[Self], y: &[Self]) -> Self {
        simd::dot_f64(x, y)
    }

    #[inline]
    fn caxpy(ar: Self, ai: Self, xr: &[Self], xi: &[Self], yr: &mut [Self], yi: &mut [Self]) {
        simd::caxpy_f64(ar, ai, xr, xi, yr, yi);
    }

    #[inline]
    fn cdotc(xr: &[Self], xi: &[Self], yr: &[Self], yi: &[Self]) -> (Self, Self) {
        simd::cdotc_f64(xr, xi, yr, yi)
    }

    #[inline]
    fn gelu_slice(z: &mut [Self], d: &mut [Self]) {
        simd::gelu_slice_f64(z, d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_round_trips() {
        assert_eq!(f64::lit(1.5), 1.5);
        assert_eq!(f32::lit(0.25), 0.25f32);
    }

    #[test]
    fn normal_draws_track_the_f64_stream() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: f64 = Scalar::standard_normal(&mut a);
        let y: f32 = Scalar::standard_normal(&mut b);
        assert!((x as f32 - y).abs() < 1e-6);
    }
}
