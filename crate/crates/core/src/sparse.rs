//! CSR sparse matrices, the kernels built on them, and the high-accuracy
//! reference solver used offline to produce exact errors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecops;

/// Compressed-sparse-row matrix.
///
/// Invariants: `row_ptr` is monotone with `row_ptr[0] == 0` and
/// `row_ptr[nrows] == vals.len()`; column indices are strictly increasing
/// within each row. The constructors enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Build from raw CSR arrays, validating the structural invariants.
    pub fn from_csr(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        vals: Vec<T>,
    ) -> Result<Self> {
        if row_ptr.len() != nrows + 1 {
            return Err(Error::InvalidData(format!(
                "row_ptr length {} != nrows + 1 = {}",
                row_ptr.len(),
                nrows + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr[nrows] != vals.len() || col_idx.len() != vals.len() {
            return Err(Error::InvalidData("inconsistent CSR arrays".into()));
        }
        for r in 0..nrows {
            if row_ptr[r] > row_ptr[r + 1] {
                return Err(Error::InvalidData(format!("row_ptr decreases at row {r}")));
            }
            let row = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidData(format!(
                        "column indices not strictly increasing in row {r}"
                    )));
                }
            }
            if let Some(&c) = row.last() {
                if c >= ncols {
                    return Err(Error::InvalidData(format!("column {c} out of range in row {r}")));
                }
            }
        }
        Ok(Self { nrows, ncols, row_ptr, col_idx, vals })
    }

    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        use std::collections::BTreeMap;
        let mut entries: BTreeMap<(usize, usize), T> = BTreeMap::new();
        for &(r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::InvalidData(format!("triplet ({r},{c}) out of range")));
            }
            *entries.entry((r, c)).or_insert_with(T::zero) += v;
        }
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut vals = Vec::with_capacity(entries.len());
        for (&(r, c), &v) in &entries {
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            vals.push(v);
            let _ = r;
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self::from_csr(nrows, ncols, row_ptr, col_idx, vals)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![T::one(); n],
        }
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Entry lookup (binary search within the row).
    pub fn get(&self, r: usize, c: usize) -> T {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.col_idx[lo..hi].binary_search(&c) {
            Ok(k) => self.vals[lo + k],
            Err(_) => T::zero(),
        }
    }

    /// y = A x into a caller buffer. Row-wise accumulation, deterministic.
    pub fn spmv_into(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.ncols, "spmv: x length mismatch");
        assert_eq!(y.len(), self.nrows, "spmv: y length mismatch");
        for r in 0..self.nrows {
            let mut acc = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    /// y = A x, allocating the output.
    pub fn spmv(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.ncols {
            return Err(Error::DimensionMismatch {
                context: "spmv",
                expected: self.ncols,
                got: x.len(),
            });
        }
        let mut y = vec![T::zero(); self.nrows];
        self.spmv_into(x, &mut y);
        Ok(y)
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let mut row_ptr = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut vals = vec![T::zero(); self.nnz()];
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let dst = row_ptr[c];
                col_idx[dst] = r;
                vals[dst] = self.vals[k];
                row_ptr[c] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr: counts,
            col_idx,
            vals,
        }
    }

    /// Bitwise symmetry check: A[i][j] == A[j][i] for every stored entry.
    pub fn is_symmetric(&self) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let t = self.transpose();
        self.row_ptr == t.row_ptr && self.col_idx == t.col_idx
            && self.vals.iter().zip(&t.vals).all(|(a, b)| *a == *b)
    }

    /// Main diagonal as a dense vector.
    pub fn diagonal(&self) -> Vec<T> {
        (0..self.nrows).map(|r| self.get(r, r)).collect()
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> T {
        let mut best = T::zero();
        for r in 0..self.nrows {
            let mut s = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k].abs();
            }
            if s > best {
                best = s;
            }
        }
        best
    }
}

/// Energy norm sqrt(v' A v) for SPD `A`.
///
/// A materially negative quadratic form reports `NotPositiveDefinite`;
/// round-off-level negatives are clamped to zero.
pub fn a_norm<T: Scalar>(a: &CsrMatrix<T>, v: &[T]) -> Result<T> {
    if v.len() != a.ncols {
        return Err(Error::DimensionMismatch {
            context: "a_norm",
            expected: a.ncols,
            got: v.len(),
        });
    }
    let av = a.spmv(v)?;
    let q = vecops::dot(v, &av);
    let floor = T::lit(-1e-10) * vecops::dot(v, v) * a.norm_inf();
    if q < floor {
        return Err(Error::NotPositiveDefinite {
            quadratic_form: q.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(q.max(T::zero()).sqrt())
}

/// Relative tolerance used by [`reference_solve`].
pub const REFERENCE_TOL: f64 = 1e-13;

/// High-accuracy solve of `A u = f` for SPD `A`, used offline to generate
/// training errors and convergence diagnostics.
///
/// Conjugate gradients run until the true residual satisfies
/// `||f - Au|| <= 1e-13 ||f||`, with residual replacement so recurrence
/// drift cannot fake convergence. The iteration cap is `50 * nrows`.
pub fn reference_solve<T: Scalar>(a: &CsrMatrix<T>, f: &[T]) -> Result<Vec<T>> {
    reference_solve_from(a, f, None)
}

/// Same as [`reference_solve`] with an optional warm start.
pub fn reference_solve_from<T: Scalar>(
    a: &CsrMatrix<T>,
    f: &[T],
    x0: Option<&[T]>,
) -> Result<Vec<T>> {
    if f.len() != a.nrows {
        return Err(Error::DimensionMismatch {
            context: "reference_solve",
            expected: a.nrows,
            got: f.len(),
        });
    }
    let n = a.nrows;
    let tol = T::lit(REFERENCE_TOL);
    let f_norm = vecops::norm2(f);
    if f_norm == T::zero() {
        return Ok(vec![T::zero(); n]);
    }

    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![T::zero(); n],
    };
    let mut r = vec![T::zero(); n];
    a.spmv_into(&x, &mut r);
    for i in 0..n {
        r[i] = f[i] - r[i];
    }
    if vecops::norm2(&r) <= tol * f_norm {
        return Ok(x);
    }

    let mut p = r.clone();
    let mut s = vec![T::zero(); n];
    let mut rr = vecops::dot(&r, &r);
    let cap = 50 * n;
    for it in 0..cap {
        a.spmv_into(&p, &mut s);
        let ps = vecops::dot(&p, &s);
        if ps <= T::zero() {
            return Err(Error::NotPositiveDefinite {
                quadratic_form: ps.to_f64().unwrap_or(f64::NAN),
            });
        }
        let alpha = rr / ps;
        vecops::axpy(alpha, &p, &mut x);
        vecops::axpy(-alpha, &s, &mut r);
        let rr_new = vecops::dot(&r, &r);
        if rr_new.sqrt() <= tol * f_norm {
            // Recurrence says done; confirm against the true residual.
            a.spmv_into(&x, &mut r);
            for i in 0..n {
                r[i] = f[i] - r[i];
            }
            let true_rr = vecops::dot(&r, &r);
            if true_rr.sqrt() <= tol * f_norm {
                return Ok(x);
            }
            p.copy_from_slice(&r);
            rr = true_rr;
            continue;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        let _ = it;
    }
    Err(Error::DidNotConverge {
        iterations: cap,
        rel_residual: (vecops::norm2(&r) / f_norm).to_f64().unwrap_or(f64::NAN),
    })
}
