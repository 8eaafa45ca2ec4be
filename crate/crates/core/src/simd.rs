//! Hot-loop kernels for `f64` with an AVX2/FMA path selected at runtime.
//!
//! The spectral-layer training passes reduce to three primitive shapes:
//! an axpy over contiguous slices, a split-complex axpy, and a
//! split-complex conjugated dot product. Each has a scalar version (the
//! reference, and the fallback on non-x86 targets) and an AVX2+FMA version.
//! Dispatch happens once per process.

#[cfg(target_arch = "x86_64")]
use std::sync::OnceLock;

#[cfg(target_arch = "x86_64")]
#[inline]
fn avx2_fma_available() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

// ---------------------------------------------------------------------------
// exp
// ---------------------------------------------------------------------------

/// Branch-free exp for f64, relative error below ~1e-13 on |x| <= 700.
///
/// Argument reduction x = k*ln2 + r with |r| <= ln2/2, then a degree-11
/// Taylor polynomial and a bit-level 2^k scale. Callers clamp their inputs
/// (activation arguments are bounded), so the out-of-range behaviour just
/// saturates.
#[inline]
pub fn exp_fast_f64(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

    let x = x.clamp(-700.0, 700.0);
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;

    // Horner evaluation of the exp Taylor series through r^11.
    let mut p = 2.505_210_838_544_172e-8; // 1/11!
    p = p * r + 2.755_731_922_398_589e-7; // 1/10!
    p = p * r + 2.755_731_922_398_589_4e-6; // 1/9!
    p = p * r + 2.480_158_730_158_73e-5; // 1/8!
    p = p * r + 1.984_126_984_126_984_2e-4; // 1/7!
    p = p * r + 1.388_888_888_888_889e-3; // 1/6!
    p = p * r + 8.333_333_333_333_333e-3; // 1/5!
    p = p * r + 4.166_666_666_666_666_4e-2; // 1/4!
    p = p * r + 1.666_666_666_666_666_6e-1; // 1/3!
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;

    let bits = (((k as i64) + 1023) << 52) as u64;
    p * f64::from_bits(bits)
}

// ---------------------------------------------------------------------------
// GeLU (tanh form) over slices
// ---------------------------------------------------------------------------

pub const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044_715;

/// Scalar GeLU returning (value, derivative); the reference for the kernels.
#[inline]
pub fn gelu_scalar(x: f64) -> (f64, f64) {
    let g = GELU_C0 * (x + GELU_C1 * x * x * x);
    let two_g = (2.0 * g).clamp(-40.0, 40.0);
    let e = exp_fast_f64(two_g);
    let t = 1.0 - 2.0 / (e + 1.0);
    let y = 0.5 * x * (1.0 + t);
    let gp = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * gp;
    (y, dy)
}

/// In-place GeLU over a slice with the derivative written alongside.
pub fn gelu_slice_f64(z: &mut [f64], d: &mut [f64]) {
    assert_eq!(z.len(), d.len());
    #[cfg(target_arch = "x86_64")]
    if avx2_fma_available() {
        unsafe { avx::gelu_slice(z, d) };
        return;
    }
    for i in 0..z.len() {
        let (y, dy) = gelu_scalar(z[i]);
        z[i] = y;
        d[i] = dy;
    }
}

// ---------------------------------------------------------------------------
// Scalar reference kernels
// ---------------------------------------------------------------------------

#[inline]
fn axpy_scalar(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[inline]
fn dot_scalar(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut a0 = 0.0;
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    let mut a3 = 0.0;
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        a0 += x[j] * y[j];
        a1 += x[j + 1] * y[j + 1];
        a2 += x[j + 2] * y[j + 2];
        a3 += x[j + 3] * y[j + 3];
    }
    for j in chunks * 4..n {
        a0 += x[j] * y[j];
    }
    (a0 + a1) + (a2 + a3)
}

#[inline]
fn caxpy_scalar(ar: f64, ai: f64, xr: &[f64], xi: &[f64], yr: &mut [f64], yi: &mut [f64]) {
    for j in 0..xr.len() {
        let re = ar * xr[j] - ai * xi[j];
        let im = ar * xi[j] + ai * xr[j];
        yr[j] += re;
        yi[j] += im;
    }
}

#[inline]
fn cdotc_scalar(xr: &[f64], xi: &[f64], yr: &[f64], yi: &[f64]) -> (f64, f64) {
    let mut re = 0.0;
    let mut im = 0.0;
    for j in 0..xr.len() {
        re += xr[j] * yr[j] + xi[j] * yi[j];
        im += xi[j] * yr[j] - xr[j] * yi[j];
    }
    (re, im)
}

// ---------------------------------------------------------------------------
// AVX2 + FMA kernels
// ---------------------------------------------------------------------------

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    /// 4-wide exp via the same reduction as `exp_fast_f64`. Inputs must be
    /// pre-clamped to a safe range (the GeLU caller clamps to +-40).
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn exp4(x: __m256d) -> __m256d {
        let log2e = _mm256_set1_pd(std::f64::consts::LOG2_E);
        let ln2_hi = _mm256_set1_pd(6.931_471_803_691_238e-1);
        let ln2_lo = _mm256_set1_pd(1.908_214_929_270_587_7e-10);
        let k = _mm256_round_pd::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(
            _mm256_mul_pd(x, log2e),
        );
        let r = _mm256_fnmadd_pd(k, ln2_hi, x);
        let r = _mm256_fnmadd_pd(k, ln2_lo, r);

        let mut p = _mm256_set1_pd(2.505_210_838_544_172e-8);
        for c in [
            2.755_731_922_398_589e-7,
            2.755_731_922_398_589_4e-6,
            2.480_158_730_158_73e-5,
            1.984_126_984_126_984_2e-4,
            1.388_888_888_888_889e-3,
            8.333_333_333_333_333e-3,
            4.166_666_666_666_666_4e-2,
            1.666_666_666_666_666_6e-1,
            0.5,
            1.0,
            1.0,
        ] {
            p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(c));
        }
        // 2^k through the exponent bits: i64 lanes of (k + 1023) << 52.
        let k32 = _mm256_cvtpd_epi32(k);
        let k64 = _mm256_cvtepi32_epi64(k32);
        let bits = _mm256_slli_epi64::<52>(_mm256_add_epi64(k64, _mm256_set1_epi64x(1023)));
        _mm256_mul_pd(p, _mm256_castsi256_pd(bits))
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gelu_slice(z: &mut [f64], d: &mut [f64]) {
        let n = z.len();
        let c0 = _mm256_set1_pd(super::GELU_C0);
        let c1 = _mm256_set1_pd(super::GELU_C1);
        let c1x3 = _mm256_set1_pd(3.0 * super::GELU_C1);
        let half = _mm256_set1_pd(0.5);
        let one = _mm256_set1_pd(1.0);
        let two = _mm256_set1_pd(2.0);
        let hi = _mm256_set1_pd(40.0);
        let lo = _mm256_set1_pd(-40.0);
        let mut j = 0;
        while j + 4 <= n {
            let x = _mm256_loadu_pd(z.as_ptr().add(j));
            let x2 = _mm256_mul_pd(x, x);
            let g = _mm256_mul_pd(c0, _mm256_fmadd_pd(c1, _mm256_mul_pd(x2, x), x));
            let two_g = _mm256_max_pd(lo, _mm256_min_pd(hi, _mm256_add_pd(g, g)));
            let e = exp4(two_g);
            let t = _mm256_sub_pd(one, _mm256_div_pd(two, _mm256_add_pd(e, one)));
            let one_t = _mm256_add_pd(one, t);
            let y = _mm256_mul_pd(_mm256_mul_pd(half, x), one_t);
            let gp = _mm256_mul_pd(c0, _mm256_fmadd_pd(c1x3, x2, one));
            let sech = _mm256_fnmadd_pd(t, t, one); // 1 - t^2
            let dy = _mm256_fmadd_pd(
                _mm256_mul_pd(_mm256_mul_pd(half, x), sech),
                gp,
                _mm256_mul_pd(half, one_t),
            );
            _mm256_storeu_pd(z.as_mut_ptr().add(j), y);
            _mm256_storeu_pd(d.as_mut_ptr().add(j), dy);
            j += 4;
        }
        while j < n {
            let (y, dy) = super::gelu_scalar(*z.get_unchecked(j));
            *z.get_unchecked_mut(j) = y;
            *d.get_unchecked_mut(j) = dy;
            j += 1;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        let n = x.len();
        let a = _mm256_set1_pd(alpha);
        let mut j = 0;
        while j + 4 <= n {
            let xv = _mm256_loadu_pd(x.as_ptr().add(j));
            let yv = _mm256_loadu_pd(y.as_ptr().add(j));
            _mm256_storeu_pd(y.as_mut_ptr().add(j), _mm256_fmadd_pd(a, xv, yv));
            j += 4;
        }
        while j < n {
            *y.get_unchecked_mut(j) += alpha * *x.get_unchecked(j);
            j += 1;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut j = 0;
        while j + 8 <= n {
            let x0 = _mm256_loadu_pd(x.as_ptr().add(j));
            let y0 = _mm256_loadu_pd(y.as_ptr().add(j));
            acc0 = _mm256_fmadd_pd(x0, y0, acc0);
            let x1 = _mm256_loadu_pd(x.as_ptr().add(j + 4));
            let y1 = _mm256_loadu_pd(y.as_ptr().add(j + 4));
            acc1 = _mm256_fmadd_pd(x1, y1, acc1);
            j += 8;
        }
        while j + 4 <= n {
            let x0 = _mm256_loadu_pd(x.as_ptr().add(j));
            let y0 = _mm256_loadu_pd(y.as_ptr().add(j));
            acc0 = _mm256_fmadd_pd(x0, y0, acc0);
            j += 4;
        }
        let acc = _mm256_add_pd(acc0, acc1);
        let lo = _mm256_castpd256_pd128(acc);
        let hi = _mm256_extractf128_pd::<1>(acc);
        let s2 = _mm_add_pd(lo, hi);
        let s1 = _mm_add_sd(s2, _mm_unpackhi_pd(s2, s2));
        let mut total = _mm_cvtsd_f64(s1);
        while j < n {
            total += *x.get_unchecked(j) * *y.get_unchecked(j);
            j += 1;
        }
        total
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn caxpy(ar: f64, ai: f64, xr: &[f64], xi: &[f64], yr: &mut [f64], yi: &mut [f64]) {
        let n = xr.len();
        let var = _mm256_set1_pd(ar);
        let vai = _mm256_set1_pd(ai);
        let mut j = 0;
        while j + 4 <= n {
            let xrv = _mm256_loadu_pd(xr.as_ptr().add(j));
            let xiv = _mm256_loadu_pd(xi.as_ptr().add(j));
            let yrv = _mm256_loadu_pd(yr.as_ptr().add(j));
            let yiv = _mm256_loadu_pd(yi.as_ptr().add(j));
            // yr += ar*xr - ai*xi
            let t0 = _mm256_fmadd_pd(var, xrv, yrv);
            let t0 = _mm256_fnmadd_pd(vai, xiv, t0);
            // yi += ar*xi + ai*xr
            let t1 = _mm256_fmadd_pd(var, xiv, yiv);
            let t1 = _mm256_fmadd_pd(vai, xrv, t1);
            _mm256_storeu_pd(yr.as_mut_ptr().add(j), t0);
            _mm256_storeu_pd(yi.as_mut_ptr().add(j), t1);
            j += 4;
        }
        while j < n {
            let re = ar * *xr.get_unchecked(j) - ai * *xi.get_unchecked(j);
            let im = ar * *xi.get_unchecked(j) + ai * *xr.get_unchecked(j);
            *yr.get_unchecked_mut(j) += re;
            *yi.get_unchecked_mut(j) += im;
            j += 1;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn cdotc(xr: &[f64], xi: &[f64], yr: &[f64], yi: &[f64]) -> (f64, f64) {
        let n = xr.len();
        let mut re_acc = _mm256_setzero_pd();
        let mut im_acc = _mm256_setzero_pd();
        let mut j = 0;
        while j + 4 <= n {
            let xrv = _mm256_loadu_pd(xr.as_ptr().add(j));
            let xiv = _mm256_loadu_pd(xi.as_ptr().add(j));
            let yrv = _mm256_loadu_pd(yr.as_ptr().add(j));
            let yiv = _mm256_loadu_pd(yi.as_ptr().add(j));
            re_acc = _mm256_fmadd_pd(xrv, yrv, re_acc);
            re_acc = _mm256_fmadd_pd(xiv, yiv, re_acc);
            im_acc = _mm256_fmadd_pd(xiv, yrv, im_acc);
            im_acc = _mm256_fnmadd_pd(xrv, yiv, im_acc);
            j += 4;
        }
        let hsum = |v: __m256d| -> f64 {
            let lo = _mm256_castpd256_pd128(v);
            let hi = _mm256_extractf128_pd::<1>(v);
            let s2 = _mm_add_pd(lo, hi);
            let s1 = _mm_add_sd(s2, _mm_unpackhi_pd(s2, s2));
            _mm_cvtsd_f64(s1)
        };
        let mut re = hsum(re_acc);
        let mut im = hsum(im_acc);
        while j < n {
            re += *xr.get_unchecked(j) * *yr.get_unchecked(j)
                + *xi.get_unchecked(j) * *yi.get_unchecked(j);
            im += *xi.get_unchecked(j) * *yr.get_unchecked(j)
                - *xr.get_unchecked(j) * *yi.get_unchecked(j);
            j += 1;
        }
        (re, im)
    }
}

// ---------------------------------------------------------------------------
// Dispatching wrappers
// ---------------------------------------------------------------------------

#[inline]
pub fn axpy_f64(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len());
    #[cfg(target_arch = "x86_64")]
    if avx2_fma_available() {
        unsafe { avx::axpy(alpha, x, y) };
        return;
    }
    axpy_scalar(alpha, x, y);
}

#[inline]
pub fn dot_f64(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    #[cfg(target_arch = "x86_64")]
    if avx2_fma_available() {
        return unsafe { avx::dot(x, y) };
    }
    dot_scalar(x, y)
}

#[inline]
pub fn caxpy_f64(ar: f64, ai: f64, xr: &[f64], xi: &[f64], yr: &mut [f64], yi: &mut [f64]) {
    assert_eq!(xr.len(), xi.len());
    assert_eq!(xr.len(), yr.len());
    assert_eq!(xr.len(), yi.len());
    #[cfg(target_arch = "x86_64")]
    if avx2_fma_available() {
        unsafe { avx::caxpy(ar, ai, xr, xi, yr, yi) };
        return;
    }
    caxpy_scalar(ar, ai, xr, xi, yr, yi);
}

#[inline]
pub fn cdotc_f64(xr: &[f64], xi: &[f64], yr: &[f64], yi: &[f64]) -> (f64, f64) {
    assert_eq!(xr.len(), xi.len());
    assert_eq!(xr.len(), yr.len());
    assert_eq!(xr.len(), yi.len());
    #[cfg(target_arch = "x86_64")]
    if avx2_fma_available() {
        return unsafe { avx::cdotc(xr, xi, yr, yi) };
    }
    cdotc_scalar(xr, xi, yr, yi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn vecs(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        (draw(0), draw(1), draw(2), draw(3))
    }

    #[test]
    fn exp_fast_matches_std() {
        for i in -400..400 {
            let x = i as f64 * 0.173;
            let got = exp_fast_f64(x);
            let want = x.exp();
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1e-300),
                "x={x}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn kernels_match_scalar_reference() {
        for n in [0usize, 1, 3, 4, 7, 32, 33, 129] {
            let (xr, xi, mut yr, mut yi) = vecs(n, n as u64 + 1);
            let (mut yr2, mut yi2) = (yr.clone(), yi.clone());

            caxpy_f64(0.7, -0.3, &xr, &xi, &mut yr, &mut yi);
            caxpy_scalar(0.7, -0.3, &xr, &xi, &mut yr2, &mut yi2);
            for j in 0..n {
                assert!((yr[j] - yr2[j]).abs() < 1e-13);
                assert!((yi[j] - yi2[j]).abs() < 1e-13);
            }

            let d = dot_f64(&xr, &xi);
            assert!((d - dot_scalar(&xr, &xi)).abs() < 1e-12);

            let (re, im) = cdotc_f64(&xr, &xi, &yr, &yi);
            let (re2, im2) = cdotc_scalar(&xr, &xi, &yr, &yi);
            assert!((re - re2).abs() < 1e-11 && (im - im2).abs() < 1e-11);

            let mut a = xr.clone();
            let mut b = xr.clone();
            axpy_f64(1.25, &xi, &mut a);
            axpy_scalar(1.25, &xi, &mut b);
            for j in 0..n {
                assert!((a[j] - b[j]).abs() < 1e-13);
            }
        }
    }
}
