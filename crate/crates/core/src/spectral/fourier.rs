//! Truncated 2D Fourier analysis/synthesis on uniform grids.
//!
//! Coefficients live on a fixed `K x K` grid of stored slots. Stored index
//! `j` maps to the signed frequency `j` for `j < ceil(K/2)` and `j - K`
//! otherwise, so the retained set is the lowest-|frequency| block in each
//! dimension. A stored mode is *live* when its negation is also stored
//! (|frequency| <= (K-1)/2 in both dimensions); the remaining edge slots
//! take no part in the transforms, which keeps the pair
//! (analysis, synthesis) an exact projection:
//!
//! * synthesis places the Hermitian average `(c_s + conj(c_{-s})) / 2` at
//!   each live position, so its output is exactly real for arbitrary
//!   complex coefficients;
//! * analysis extracts live positions of the unitary-normalized spectrum,
//!   so coefficients are grid-independent for band-limited fields;
//! * analysis(synthesis(c)) equals c on the range of analysis, and
//!   synthesis-analysis is idempotent on fields.
//!
//! The batched pipeline packs two real fields per complex FFT.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stored-index -> signed frequency map for a `K`-slot dimension.
#[inline]
pub fn slot_frequency(j: usize, k: usize) -> i64 {
    if j < k.div_ceil(2) {
        j as i64
    } else {
        j as i64 - k as i64
    }
}

/// The retained mode grid for one truncation size.
#[derive(Debug, Clone)]
pub struct ModeSet {
    /// Modes per dimension (stored slots).
    pub k: usize,
    /// Live slots in stored-index order: (slot, k1, k2).
    live: Vec<(usize, i64, i64)>,
    /// For each live index, the live index of the negated mode.
    neg: Vec<usize>,
}

impl ModeSet {
    pub fn new(k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidConfig("mode count must be >= 1".into()));
        }
        let max_live = ((k - 1) / 2) as i64;
        let mut live = Vec::new();
        for j1 in 0..k {
            let k1 = slot_frequency(j1, k);
            for j2 in 0..k {
                let k2 = slot_frequency(j2, k);
                if k1.abs() <= max_live && k2.abs() <= max_live {
                    live.push((j1 * k + j2, k1, k2));
                }
            }
        }
        let slot_of = |k1: i64, k2: i64| -> usize {
            let j1 = if k1 >= 0 { k1 as usize } else { (k1 + k as i64) as usize };
            let j2 = if k2 >= 0 { k2 as usize } else { (k2 + k as i64) as usize };
            j1 * k + j2
        };
        let neg = live
            .iter()
            .map(|&(_, k1, k2)| {
                let target = slot_of(-k1, -k2);
                live.iter().position(|&(s, _, _)| s == target).expect("negation is live")
            })
            .collect();
        Ok(Self { k, live, neg })
    }

    #[inline]
    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    #[inline]
    pub fn live(&self) -> &[(usize, i64, i64)] {
        &self.live
    }

    #[inline]
    pub fn neg(&self) -> &[usize] {
        &self.neg
    }

    /// Smallest grid this mode set can be evaluated on without aliasing.
    pub fn min_grid(&self) -> usize {
        (2 * ((self.k - 1) / 2) + 1).max(1)
    }

    /// Flattened grid position of each live mode on an `n x n` grid.
    pub fn positions(&self, n: usize) -> Result<Vec<usize>> {
        if n < self.min_grid() {
            return Err(Error::InvalidConfig(format!(
                "grid {n} too small for {} modes per dimension (needs >= {})",
                self.k,
                self.min_grid()
            )));
        }
        let wrap = |f: i64| -> usize {
            if f >= 0 {
                f as usize
            } else {
                (f + n as i64) as usize
            }
        };
        Ok(self.live.iter().map(|&(_, k1, k2)| wrap(k1) * n + wrap(k2)).collect())
    }
}

/// Largest mode count per dimension usable on an `n x n` grid.
pub fn max_modes_for_grid(n: usize) -> usize {
    // Inverse of min_grid: 2*((k-1)/2)+1 <= n.
    if n == 0 {
        0
    } else {
        let half = (n - 1) / 2;
        2 * half + 2
    }
}

/// Dense K x K complex coefficient grid (dead slots zero), split storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffGrid<T> {
    pub k: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> CoeffGrid<T> {
    pub fn zeros(k: usize) -> Self {
        Self { k, re: vec![T::zero(); k * k], im: vec![T::zero(); k * k] }
    }
}

// ---------------------------------------------------------------------------
// 2D FFT on square grids
// ---------------------------------------------------------------------------

/// Cached forward/inverse plans for one grid size. Transforms are
/// unnormalized in both directions; the callers carry the 1/n^2 factor.
pub struct Fft2<T: Scalar> {
    pub n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

/// Reusable scratch for [`Fft2`].
pub struct Fft2Scratch<T> {
    fft: Vec<Complex<T>>,
    tr: Vec<Complex<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn make_scratch(&self) -> Fft2Scratch<T> {
        let len = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        Fft2Scratch {
            fft: vec![Complex::new(T::zero(), T::zero()); len],
            tr: vec![Complex::new(T::zero(), T::zero()); self.n * self.n],
        }
    }

    fn transpose(&self, src: &[Complex<T>], dst: &mut [Complex<T>]) {
        let n = self.n;
        const B: usize = 16;
        for ib in (0..n).step_by(B) {
            for jb in (0..n).step_by(B) {
                for i in ib..(ib + B).min(n) {
                    for j in jb..(jb + B).min(n) {
                        dst[j * n + i] = src[i * n + j];
                    }
                }
            }
        }
    }

    /// Rows pass, transpose, rows pass; the result replaces `buf` in the
    /// TRANSPOSED layout (`[k2][k1]` for the forward direction). When
    /// `rows` is given, the post-transpose pass only processes those rows;
    /// the remaining rows of the output are unspecified.
    fn process_2d(
        &self,
        plan: &Arc<dyn Fft<T>>,
        buf: &mut Vec<Complex<T>>,
        ws: &mut Fft2Scratch<T>,
        rows: Option<&[usize]>,
    ) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n * n);
        plan.process_with_scratch(buf, &mut ws.fft);
        self.transpose(buf, &mut ws.tr);
        match rows {
            Some(list) => {
                for &r in list {
                    plan.process_with_scratch(&mut ws.tr[r * n..(r + 1) * n], &mut ws.fft);
                }
            }
            None => plan.process_with_scratch(&mut ws.tr, &mut ws.fft),
        }
        std::mem::swap(buf, &mut ws.tr);
    }

    /// Spatial field -> spectrum in transposed `[k2][k1]` layout.
    pub fn forward_transposed(
        &self,
        buf: &mut Vec<Complex<T>>,
        ws: &mut Fft2Scratch<T>,
        spectrum_rows: Option<&[usize]>,
    ) {
        self.process_2d(&self.fwd, buf, ws, spectrum_rows);
    }

    /// Spectrum in transposed `[k2][k1]` layout -> spatial field. The row
    /// list names the nonzero spectrum rows (the first pass is pruned to
    /// them); all other rows must be zero.
    pub fn inverse_transposed(
        &self,
        buf: &mut Vec<Complex<T>>,
        ws: &mut Fft2Scratch<T>,
        spectrum_rows: Option<&[usize]>,
    ) {
        // Mirrors the forward factorization: per-row inverse over the
        // spectrum rows, transpose, per-row inverse over spatial rows.
        let n = self.n;
        debug_assert_eq!(buf.len(), n * n);
        match spectrum_rows {
            Some(list) => {
                for &r in list {
                    self.inv
                        .process_with_scratch(&mut buf[r * n..(r + 1) * n], &mut ws.fft);
                }
            }
            None => self.inv.process_with_scratch(buf, &mut ws.fft),
        }
        self.transpose(buf, &mut ws.tr);
        self.inv.process_with_scratch(&mut ws.tr, &mut ws.fft);
        std::mem::swap(buf, &mut ws.tr);
    }
}

// ---------------------------------------------------------------------------
// Truncated transform pipeline for one (modes, grid) pair
// ---------------------------------------------------------------------------

/// Analysis/synthesis between `n x n` real fields and the live modes of a
/// [`ModeSet`], plus the adjoint maps used by reverse-mode training.
pub struct SpectralPipe<T: Scalar> {
    pub modes: ModeSet,
    pub fft: Fft2<T>,
    /// Live-mode positions in the transposed spectrum layout `[k2][k1]`.
    pos: Vec<usize>,
    pos_neg: Vec<usize>,
    /// Distinct spectrum rows (wrapped k2 values) carrying live modes.
    live_rows: Vec<usize>,
}

/// Scratch for [`SpectralPipe`] operations.
pub struct PipeScratch<T> {
    buf: Vec<Complex<T>>,
    fft: Fft2Scratch<T>,
}

impl<T: Scalar> SpectralPipe<T> {
    pub fn new(modes_per_dim: usize, n: usize) -> Result<Self> {
        let modes = ModeSet::new(modes_per_dim)?;
        // Validate the grid/mode fit, then build transposed-layout positions.
        modes.positions(n)?;
        let wrap = |f: i64| -> usize {
            if f >= 0 {
                f as usize
            } else {
                (f + n as i64) as usize
            }
        };
        let pos: Vec<usize> = modes
            .live()
            .iter()
            .map(|&(_, k1, k2)| wrap(k2) * n + wrap(k1))
            .collect();
        let pos_neg: Vec<usize> = modes.neg().iter().map(|&ni| pos[ni]).collect();
        let mut live_rows: Vec<usize> = modes.live().iter().map(|&(_, _, k2)| wrap(k2)).collect();
        live_rows.sort_unstable();
        live_rows.dedup();
        Ok(Self { modes, fft: Fft2::new(n), pos, pos_neg, live_rows })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.fft.n
    }

    pub fn make_scratch(&self) -> PipeScratch<T> {
        PipeScratch {
            buf: vec![Complex::new(T::zero(), T::zero()); self.n() * self.n()],
            fft: self.fft.make_scratch(),
        }
    }

    /// Forward transform of one or two packed real fields followed by live
    /// extraction: `out[li] = scale * FFT(field)[pos(li)]`.
    ///
    /// With `scale = 1/n^2` this is the analysis operator; with `scale = 1`
    /// it is the adjoint of synthesis (inputs are real either way).
    /// Outputs are written at stride `stride` starting at `offset`
    /// (`out_re[offset + li * stride]`), matching the engine's coefficient
    /// plane layout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_extract_pair(
        &self,
        f1: &[T],
        f2: Option<&[T]>,
        scale: T,
        out1: (&mut [T], &mut [T]),
        mut out2: Option<(&mut [T], &mut [T])>,
        offset: usize,
        stride: usize,
        ws: &mut PipeScratch<T>,
    ) {
        let n2 = self.n() * self.n();
        debug_assert_eq!(f1.len(), n2);
        match f2 {
            Some(g) => {
                for i in 0..n2 {
                    ws.buf[i] = Complex::new(f1[i], g[i]);
                }
            }
            None => {
                for i in 0..n2 {
                    ws.buf[i] = Complex::new(f1[i], T::zero());
                }
            }
        }
        self.fft
            .forward_transposed(&mut ws.buf, &mut ws.fft, Some(&self.live_rows));
        let half = T::lit(0.5);
        for li in 0..self.pos.len() {
            let b = ws.buf[self.pos[li]];
            let idx = offset + li * stride;
            if let Some((ref mut o2r, ref mut o2i)) = out2 {
                let bm = ws.buf[self.pos_neg[li]];
                // Unpack the two Hermitian halves of the packed transform.
                let f_re = (b.re + bm.re) * half;
                let f_im = (b.im - bm.im) * half;
                let g_re = (b.im + bm.im) * half;
                let g_im = (bm.re - b.re) * half;
                out1.0[idx] = scale * f_re;
                out1.1[idx] = scale * f_im;
                o2r[idx] = scale * g_re;
                o2i[idx] = scale * g_im;
            } else {
                out1.0[idx] = scale * b.re;
                out1.1[idx] = scale * b.im;
            }
        }
    }

    /// Hermitian-projected placement of one or two live coefficient sets
    /// followed by an inverse transform: the output fields are exactly real
    /// and are returned through `out1` / `out2`.
    ///
    /// With `scale = 1` this is the synthesis operator; with `scale = 1/n^2`
    /// it is the adjoint of analysis.
    #[allow(clippy::too_many_arguments)]
    pub fn place_invert_pair(
        &self,
        c1: (&[T], &[T]),
        c2: Option<(&[T], &[T])>,
        scale: T,
        out1: &mut [T],
        out2: Option<&mut [T]>,
        offset: usize,
        stride: usize,
        ws: &mut PipeScratch<T>,
    ) {
        let n2 = self.n() * self.n();
        for v in ws.buf.iter_mut() {
            *v = Complex::new(T::zero(), T::zero());
        }
        let half = T::lit(0.5);
        let neg = self.modes.neg();
        for li in 0..self.pos.len() {
            let idx = offset + li * stride;
            let jdx = offset + neg[li] * stride;
            // Hermitian average of the first set.
            let fr = (c1.0[idx] + c1.0[jdx]) * half;
            let fi = (c1.1[idx] - c1.1[jdx]) * half;
            let (re, im) = if let Some((c2r, c2i)) = c2 {
                // Second set rides on the imaginary part: i * Herm(c2).
                let gr = (c2r[idx] + c2r[jdx]) * half;
                let gi = (c2i[idx] - c2i[jdx]) * half;
                (fr - gi, fi + gr)
            } else {
                (fr, fi)
            };
            ws.buf[self.pos[li]] = Complex::new(scale * re, scale * im);
        }
        self.fft
            .inverse_transposed(&mut ws.buf, &mut ws.fft, Some(&self.live_rows));
        match out2 {
            Some(o2) => {
                for i in 0..n2 {
                    out1[i] = ws.buf[i].re;
                    o2[i] = ws.buf[i].im;
                }
            }
            None => {
                for i in 0..n2 {
                    out1[i] = ws.buf[i].re;
                }
            }
        }
    }

    /// Analysis of a single field into a dense coefficient grid.
    pub fn analyze(&self, field: &[T]) -> Result<CoeffGrid<T>> {
        let n2 = self.n() * self.n();
        if field.len() != n2 {
            return Err(Error::DimensionMismatch {
                context: "analysis",
                expected: n2,
                got: field.len(),
            });
        }
        let mut ws = self.make_scratch();
        let k = self.modes.k;
        let live = self.modes.live().to_vec();
        let mut packed_re = vec![T::zero(); live.len()];
        let mut packed_im = vec![T::zero(); live.len()];
        let inv_n2 = T::one() / T::lit(n2 as f64);
        self.forward_extract_pair(
            field,
            None,
            inv_n2,
            (&mut packed_re, &mut packed_im),
            None,
            0,
            1,
            &mut ws,
        );
        let mut grid = CoeffGrid::zeros(k);
        for (li, &(slot, _, _)) in live.iter().enumerate() {
            grid.re[slot] = packed_re[li];
            grid.im[slot] = packed_im[li];
        }
        Ok(grid)
    }

    /// Synthesis of a dense coefficient grid onto this pipe's grid size.
    pub fn synthesize(&self, coeffs: &CoeffGrid<T>) -> Result<Vec<T>> {
        if coeffs.k != self.modes.k {
            return Err(Error::DimensionMismatch {
                context: "synthesis",
                expected: self.modes.k,
                got: coeffs.k,
            });
        }
        let mut ws = self.make_scratch();
        let live = self.modes.live();
        let mut packed_re = vec![T::zero(); live.len()];
        let mut packed_im = vec![T::zero(); live.len()];
        for (li, &(slot, _, _)) in live.iter().enumerate() {
            packed_re[li] = coeffs.re[slot];
            packed_im[li] = coeffs.im[slot];
        }
        let mut out = vec![T::zero(); self.n() * self.n()];
        self.place_invert_pair(
            (&packed_re, &packed_im),
            None,
            T::one(),
            &mut out,
            None,
            0,
            1,
            &mut ws,
        );
        Ok(out)
    }
}
