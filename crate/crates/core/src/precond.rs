//! Classical baseline preconditioners behind the [`Preconditioner`] contract:
//! k-sweep Jacobi, k-sweep symmetric Gauss-Seidel, and a row-wise incomplete
//! LU factorization with a hard fill cap.

use crate::error::{Error, Result};
use crate::krylov::Preconditioner;
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

fn checked_inverse_diagonal<T: Scalar>(a: &CsrMatrix<T>) -> Result<Vec<T>> {
    let diag = a.diagonal();
    for (row, &d) in diag.iter().enumerate() {
        if d == T::zero() {
            return Err(Error::ZeroDiagonal { row });
        }
    }
    Ok(diag.into_iter().map(|d| T::one() / d).collect())
}

/// `k` Jacobi sweeps from a zero initial guess:
/// `x <- x + D^{-1} (r - A x)`.
pub struct JacobiPreconditioner<T> {
    matrix: CsrMatrix<T>,
    inv_diag: Vec<T>,
    sweeps: usize,
}

impl<T: Scalar> JacobiPreconditioner<T> {
    pub fn new(matrix: &CsrMatrix<T>, sweeps: usize) -> Result<Self> {
        if sweeps < 1 {
            return Err(Error::InvalidConfig("jacobi sweeps must be >= 1".into()));
        }
        Ok(Self {
            inv_diag: checked_inverse_diagonal(matrix)?,
            matrix: matrix.clone(),
            sweeps,
        })
    }
}

impl<T: Scalar> Preconditioner<T> for JacobiPreconditioner<T> {
    fn apply(&self, r: &[T]) -> Vec<T> {
        let n = self.matrix.nrows;
        // First sweep from x = 0 is just D^{-1} r.
        let mut x: Vec<T> = r.iter().zip(&self.inv_diag).map(|(ri, di)| *ri * *di).collect();
        let mut ax = vec![T::zero(); n];
        for _ in 1..self.sweeps {
            self.matrix.spmv_into(&x, &mut ax);
            for i in 0..n {
                x[i] += self.inv_diag[i] * (r[i] - ax[i]);
            }
        }
        x
    }

    fn name(&self) -> String {
        format!("jacobi({})", self.sweeps)
    }
}

/// `k` symmetric Gauss-Seidel sweeps from a zero initial guess. Each sweep
/// is a forward pass with the lower triangle (diagonal included) followed by
/// a backward pass with the upper triangle.
pub struct SymmetricGaussSeidelPreconditioner<T> {
    matrix: CsrMatrix<T>,
    diag_pos: Vec<usize>,
    sweeps: usize,
}

impl<T: Scalar> SymmetricGaussSeidelPreconditioner<T> {
    pub fn new(matrix: &CsrMatrix<T>, sweeps: usize) -> Result<Self> {
        if sweeps < 1 {
            return Err(Error::InvalidConfig("sgs sweeps must be >= 1".into()));
        }
        let mut diag_pos = Vec::with_capacity(matrix.nrows);
        for r in 0..matrix.nrows {
            let lo = matrix.row_ptr[r];
            let hi = matrix.row_ptr[r + 1];
            let k = matrix.col_idx[lo..hi]
                .binary_search(&r)
                .map_err(|_| Error::ZeroDiagonal { row: r })?;
            if matrix.vals[lo + k] == T::zero() {
                return Err(Error::ZeroDiagonal { row: r });
            }
            diag_pos.push(lo + k);
        }
        Ok(Self { matrix: matrix.clone(), diag_pos, sweeps })
    }

    /// x += L^{-1}(r - A x), forward substitution on the lower triangle.
    fn forward_update(&self, r: &[T], x: &mut [T]) {
        let a = &self.matrix;
        let n = a.nrows;
        let mut ax = vec![T::zero(); n];
        a.spmv_into(x, &mut ax);
        let mut z = vec![T::zero(); n];
        for i in 0..n {
            let mut acc = r[i] - ax[i];
            for k in a.row_ptr[i]..self.diag_pos[i] {
                acc -= a.vals[k] * z[a.col_idx[k]];
            }
            z[i] = acc / a.vals[self.diag_pos[i]];
        }
        for i in 0..n {
            x[i] += z[i];
        }
    }

    /// x += U^{-1}(r - A x), backward substitution on the upper triangle.
    fn backward_update(&self, r: &[T], x: &mut [T]) {
        let a = &self.matrix;
        let n = a.nrows;
        let mut ax = vec![T::zero(); n];
        a.spmv_into(x, &mut ax);
        let mut z = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut acc = r[i] - ax[i];
            for k in self.diag_pos[i] + 1..a.row_ptr[i + 1] {
                acc -= a.vals[k] * z[a.col_idx[k]];
            }
            z[i] = acc / a.vals[self.diag_pos[i]];
        }
        for i in 0..n {
            x[i] += z[i];
        }
    }
}

impl<T: Scalar> Preconditioner<T> for SymmetricGaussSeidelPreconditioner<T> {
    fn apply(&self, r: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.matrix.nrows];
        for sweep in 0..self.sweeps {
            if sweep == 0 {
                // x = 0: the forward half reduces to solving L z = r.
                let a = &self.matrix;
                for i in 0..a.nrows {
                    let mut acc = r[i];
                    for k in a.row_ptr[i]..self.diag_pos[i] {
                        acc -= a.vals[k] * x[a.col_idx[k]];
                    }
                    x[i] = acc / a.vals[self.diag_pos[i]];
                }
            } else {
                self.forward_update(r, &mut x);
            }
            self.backward_update(r, &mut x);
        }
        x
    }

    fn name(&self) -> String {
        format!("gs({})", self.sweeps)
    }
}

/// Incomplete LU factors with controlled fill.
///
/// `L` is unit-lower-triangular (unit diagonal implicit), `U` is upper
/// triangular including the diagonal. The factorization keeps, per row, the
/// largest entries after a drop-tolerance pass so that
/// `nnz(L) + nnz(U) <= fill_factor * nnz(A) + n`.
pub struct IluPreconditioner<T> {
    pub l: CsrMatrix<T>,
    pub u: CsrMatrix<T>,
    pub fill_factor: f64,
    pub drop_tol: f64,
}

/// Default drop tolerance of [`ilu_factor`].
pub const ILU_DEFAULT_DROP_TOL: f64 = 1e-4;

/// Row-wise ILUT factorization.
///
/// Entries below `drop_tol * ||row||_2` are dropped during elimination;
/// afterwards each row keeps only its largest entries subject to the global
/// fill budget. The diagonal of `U` is always kept and is charged to the
/// `+ n` allowance of the fill bound.
pub fn ilu_factor<T: Scalar>(
    a: &CsrMatrix<T>,
    fill_factor: f64,
    drop_tol: f64,
) -> Result<IluPreconditioner<T>> {
    if fill_factor < 1.0 {
        return Err(Error::InvalidConfig("ilu fill_factor must be >= 1".into()));
    }
    if drop_tol < 0.0 {
        return Err(Error::InvalidConfig("ilu drop_tol must be >= 0".into()));
    }
    let n = a.nrows;
    let mut l_rows: Vec<Vec<(usize, T)>> = Vec::with_capacity(n);
    let mut u_rows: Vec<Vec<(usize, T)>> = Vec::with_capacity(n);

    // Dense workspace for the current row.
    let mut w = vec![T::zero(); n];
    let mut pattern: Vec<usize> = Vec::new();
    let mut in_pattern = vec![false; n];

    for i in 0..n {
        pattern.clear();
        let row_nnz = a.row_ptr[i + 1] - a.row_ptr[i];
        let mut row_norm = T::zero();
        for k in a.row_ptr[i]..a.row_ptr[i + 1] {
            let c = a.col_idx[k];
            w[c] = a.vals[k];
            row_norm += a.vals[k] * a.vals[k];
            pattern.push(c);
            in_pattern[c] = true;
        }
        let drop_floor = T::lit(drop_tol) * row_norm.sqrt();

        // Eliminate with previous U rows in ascending column order.
        let mut scan = 0;
        while scan < pattern.len() {
            // Find the smallest untreated column below the diagonal.
            let mut kcol = usize::MAX;
            for &c in &pattern[scan..] {
                if c < i && c < kcol {
                    kcol = c;
                }
            }
            if kcol == usize::MAX {
                break;
            }
            // Move kcol into the scanned prefix by swapping.
            let pos = pattern[scan..].iter().position(|&c| c == kcol).unwrap() + scan;
            pattern.swap(scan, pos);
            scan += 1;

            let u_diag = u_rows[kcol][0].1;
            let factor = w[kcol] / u_diag;
            // Multipliers live on the unit-diagonal scale of L, so they are
            // dropped against the bare tolerance rather than the row norm.
            if factor.abs() < T::lit(drop_tol) {
                w[kcol] = T::zero();
                continue;
            }
            w[kcol] = factor;
            for &(c, v) in u_rows[kcol].iter().skip(1) {
                if !in_pattern[c] {
                    in_pattern[c] = true;
                    pattern.push(c);
                }
                w[c] = w[c] - factor * v;
            }
        }

        // Split, drop, and rank by magnitude.
        let mut l_part: Vec<(usize, T)> = Vec::new();
        let mut u_part: Vec<(usize, T)> = Vec::new();
        let mut diag = T::zero();
        for &c in &pattern {
            let v = w[c];
            in_pattern[c] = false;
            w[c] = T::zero();
            if v == T::zero() {
                continue;
            }
            if c == i {
                diag = v;
            } else if c < i {
                if v.abs() >= T::lit(drop_tol) {
                    l_part.push((c, v));
                }
            } else if v.abs() >= drop_floor {
                u_part.push((c, v));
            }
        }
        if diag == T::zero() || !diag.is_finite() {
            return Err(Error::ZeroPivot { row: i });
        }

        // Per-row budget derived from the global bound
        // nnz(L) + nnz(U) <= fill_factor * nnz(A) + n.
        let budget = (fill_factor * row_nnz as f64).floor() as usize;
        let keep_l = budget / 2;
        let keep_u = budget - keep_l;
        let top = |mut part: Vec<(usize, T)>, keep: usize| -> Vec<(usize, T)> {
            if part.len() > keep {
                part.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap());
                part.truncate(keep);
            }
            part.sort_by_key(|&(c, _)| c);
            part
        };
        let l_kept = top(l_part, keep_l);
        let mut u_kept = top(u_part, keep_u);
        let mut u_row = Vec::with_capacity(u_kept.len() + 1);
        u_row.push((i, diag));
        u_row.append(&mut u_kept);
        l_rows.push(l_kept);
        u_rows.push(u_row);
    }

    let to_csr = |rows: Vec<Vec<(usize, T)>>| -> Result<CsrMatrix<T>> {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix::from_csr(n, n, row_ptr, col_idx, vals)
    };
    // U rows currently store the diagonal first; restore column order.
    let u_sorted: Vec<Vec<(usize, T)>> = u_rows
        .into_iter()
        .map(|mut row| {
            row.sort_by_key(|&(c, _)| c);
            row
        })
        .collect();
    let l = to_csr(l_rows)?;
    let u = to_csr(u_sorted)?;

    let bound = (fill_factor * a.nnz() as f64) as usize + n;
    debug_assert!(l.nnz() + u.nnz() <= bound, "ILU fill bound violated");
    Ok(IluPreconditioner { l, u, fill_factor, drop_tol })
}

impl<T: Scalar> IluPreconditioner<T> {
    pub fn nnz(&self) -> usize {
        self.l.nnz() + self.u.nnz()
    }

    /// Solve `L y = r` (unit diagonal) then `U w = y`.
    pub fn solve(&self, r: &[T]) -> Result<Vec<T>> {
        let n = self.l.nrows;
        if r.len() != n {
            return Err(Error::DimensionMismatch {
                context: "ilu apply",
                expected: n,
                got: r.len(),
            });
        }
        let mut y = r.to_vec();
        for i in 0..n {
            let mut acc = y[i];
            for k in self.l.row_ptr[i]..self.l.row_ptr[i + 1] {
                acc -= self.l.vals[k] * y[self.l.col_idx[k]];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let lo = self.u.row_ptr[i];
            let hi = self.u.row_ptr[i + 1];
            let mut acc = y[i];
            let mut diag = T::zero();
            for k in lo..hi {
                let c = self.u.col_idx[k];
                if c == i {
                    diag = self.u.vals[k];
                } else {
                    acc -= self.u.vals[k] * y[c];
                }
            }
            if diag == T::zero() {
                return Err(Error::ZeroPivot { row: i });
            }
            y[i] = acc / diag;
        }
        Ok(y)
    }
}

impl<T: Scalar> Preconditioner<T> for IluPreconditioner<T> {
    fn apply(&self, r: &[T]) -> Vec<T> {
        self.solve(r).expect("ilu factors validated at construction")
    }

    fn name(&self) -> String {
        format!("ilu({})", self.fill_factor)
    }
}
