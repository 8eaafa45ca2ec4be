//! Conjugate gradients and the flexible variant with a pluggable, possibly
//! nonlinear preconditioner.
//!
//! The flexible solver keeps the last `m_max` direction triples and
//! orthogonalizes each new preconditioned residual against the window
//! selected by the truncation schedule `m_i = min(i, max(1, i mod (m_max+1)))`.
//! Note the schedule yields `m_0 = 0` (no orthogonalization on the first
//! step) and periodically resets the window to a single direction.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::{a_norm, CsrMatrix};
use crate::vecops;

/// Behavioural contract for preconditioners: a deterministic map from a
/// residual to a correction of the same dimension. Implementations may be
/// nonlinear; they must be safe to call concurrently.
pub trait Preconditioner<T>: Sync {
    fn apply(&self, r: &[T]) -> Vec<T>;

    /// Short label used in reports.
    fn name(&self) -> String {
        "preconditioner".to_string()
    }
}

/// The trivial preconditioner, turning FCG into plain CG.
pub struct IdentityPreconditioner;

impl<T: Scalar> Preconditioner<T> for IdentityPreconditioner {
    fn apply(&self, r: &[T]) -> Vec<T> {
        r.to_vec()
    }
    fn name(&self) -> String {
        "identity".into()
    }
}

/// Exact-inverse preconditioner backed by the offline reference solver.
/// Only sensible for tests and diagnostics.
pub struct ExactInversePreconditioner<'a, T> {
    pub matrix: &'a CsrMatrix<T>,
}

impl<T: Scalar> Preconditioner<T> for ExactInversePreconditioner<'_, T> {
    fn apply(&self, r: &[T]) -> Vec<T> {
        crate::sparse::reference_solve(self.matrix, r).expect("reference solve in preconditioner")
    }
    fn name(&self) -> String {
        "exact-inverse".into()
    }
}

/// Per-iteration history of one solve. Arrays are indexed by iterate:
/// entry `i` belongs to `u_i` (so `rel_residual[0] == 1`), and all present
/// arrays have equal length.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceRecord {
    pub rel_residual: Vec<f64>,
    pub a_norm_error: Option<Vec<f64>>,
    pub epsilon: Option<Vec<f64>>,
    pub ms: Vec<f64>,
}

impl ConvergenceRecord {
    pub fn iterations(&self) -> usize {
        self.rel_residual.len().saturating_sub(1)
    }

    /// CSV with columns `iter,rel_residual,a_norm_error,epsilon,ms`.
    /// Missing diagnostics serialize as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,rel_residual,a_norm_error,epsilon,ms\n");
        for i in 0..self.rel_residual.len() {
            let an = self
                .a_norm_error
                .as_ref()
                .map(|v: &Vec<f64>| format!("{:e}", v[i]))
                .unwrap_or_default();
            let ep = self
                .epsilon
                .as_ref()
                .map(|v: &Vec<f64>| format!("{:e}", v[i]))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{},{},{:.3}\n",
                i, self.rel_residual[i], an, ep, self.ms[i]
            ));
        }
        out
    }
}

/// First iterate index whose relative residual is at or below `tau`.
pub fn iterations_to_threshold(record: &ConvergenceRecord, tau: f64) -> Option<usize> {
    record.rel_residual.iter().position(|&r| r <= tau)
}

/// Truncation schedule of the flexible solver: `min(i, max(1, i mod (m_max+1)))`.
#[inline]
pub fn m_schedule(i: usize, m_max: usize) -> usize {
    debug_assert!(m_max >= 1);
    i.min(1.max(i % (m_max + 1)))
}

/// Plain conjugate gradients. Stops at the first iterate with
/// `||r_i|| / ||r_0|| <= tol` or after `max_iter` iterations.
pub fn cg<T: Scalar>(
    a: &CsrMatrix<T>,
    f: &[T],
    u0: &[T],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<T>, ConvergenceRecord)> {
    cg_observed(a, f, u0, tol, max_iter, |_, _, _| {})
}

/// CG with a per-iteration observer `(i, u_i, r_i)` invoked after every
/// update. The observer is what the training pipeline uses to harvest
/// residual/iterate pairs from the solver run.
pub fn cg_observed<T: Scalar>(
    a: &CsrMatrix<T>,
    f: &[T],
    u0: &[T],
    tol: f64,
    max_iter: usize,
    mut observe: impl FnMut(usize, &[T], &[T]),
) -> Result<(Vec<T>, ConvergenceRecord)> {
    let n = a.nrows;
    check_dims("cg", n, f.len(), u0.len())?;
    let start = Instant::now();

    let mut u = u0.to_vec();
    let mut r = vecops::sub(f, &a.spmv(&u)?);
    let r0_norm = vecops::norm2(&r);
    let mut record = ConvergenceRecord {
        rel_residual: vec![1.0],
        ms: vec![0.0],
        ..Default::default()
    };
    if r0_norm == T::zero() {
        return Ok((u, record));
    }

    let mut p = r.clone();
    let mut s = vec![T::zero(); n];
    for i in 0..max_iter {
        a.spmv_into(&p, &mut s);
        let ps = vecops::dot(&p, &s);
        if ps <= T::zero() {
            return Err(Error::BreakdownZeroCurvature {
                iteration: i,
                curvature: ps.to_f64().unwrap_or(f64::NAN),
            });
        }
        let alpha = vecops::dot(&p, &r) / ps;
        vecops::axpy(alpha, &p, &mut u);
        vecops::axpy(-alpha, &s, &mut r);

        observe(i + 1, &u, &r);
        let rel = (vecops::norm2(&r) / r0_norm).to_f64().unwrap_or(f64::NAN);
        record.rel_residual.push(rel);
        record.ms.push(start.elapsed().as_secs_f64() * 1e3);
        if rel <= tol {
            break;
        }
        // Direction update with the same inner products the flexible
        // variant uses, so the two coincide in exact arithmetic.
        let beta = -vecops::dot(&r, &s) / ps;
        for j in 0..n {
            p[j] = r[j] + beta * p[j];
        }
    }
    Ok((u, record))
}

/// Options for [`fcg`].
pub struct FcgConfig<'a, T> {
    /// Number of retained direction triples.
    pub m_max: usize,
    /// Relative-residual stopping threshold.
    pub tol: f64,
    pub max_iter: usize,
    /// When provided, the record carries `||u - u_i||_A` and the
    /// preconditioner-deviation series
    /// `eps_i = ||B(r_i) - e_i||_A / ||e_i||_A` with `e_i = u_exact - u_i`.
    pub u_exact: Option<&'a [T]>,
}

impl<T> FcgConfig<'_, T> {
    pub fn new(m_max: usize, tol: f64, max_iter: usize) -> Self {
        Self { m_max, tol, max_iter, u_exact: None }
    }
}

/// Flexible conjugate gradients with truncated orthogonalization.
pub fn fcg<T: Scalar>(
    a: &CsrMatrix<T>,
    f: &[T],
    precond: &dyn Preconditioner<T>,
    u0: &[T],
    cfg: &FcgConfig<'_, T>,
) -> Result<(Vec<T>, ConvergenceRecord)> {
    let n = a.nrows;
    check_dims("fcg", n, f.len(), u0.len())?;
    if cfg.m_max < 1 {
        return Err(Error::InvalidConfig("fcg m_max must be >= 1".into()));
    }
    if let Some(ue) = cfg.u_exact {
        if ue.len() != n {
            return Err(Error::DimensionMismatch {
                context: "fcg u_exact",
                expected: n,
                got: ue.len(),
            });
        }
    }
    let start = Instant::now();

    let mut u = u0.to_vec();
    let mut r = vecops::sub(f, &a.spmv(&u)?);
    let r0_norm = vecops::norm2(&r);
    let mut record = ConvergenceRecord {
        rel_residual: vec![1.0],
        ms: vec![0.0],
        a_norm_error: cfg.u_exact.map(|_| Vec::new()),
        epsilon: cfg.u_exact.map(|_| Vec::new()),
    };
    if r0_norm == T::zero() {
        if let Some(ue) = cfg.u_exact {
            push_diagnostics(a, precond, &u, &r, ue, &mut record)?;
        }
        return Ok((u, record));
    }

    // Ring buffer of the last m_max (p, s = Ap, <p, s>) triples.
    let mut dirs: Vec<Option<(Vec<T>, Vec<T>, T)>> = (0..cfg.m_max).map(|_| None).collect();

    for i in 0..cfg.max_iter {
        let w = precond.apply(&r);
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                context: "preconditioner output",
                expected: n,
                got: w.len(),
            });
        }
        if !vecops::all_finite(&w) {
            return Err(Error::NonFinitePreconditioner { iteration: i });
        }
        if let Some(ue) = cfg.u_exact {
            push_diagnostics_with_w(a, &w, &u, ue, &mut record)?;
        }

        let m_i = m_schedule(i, cfg.m_max);
        let mut p = w;
        for k in i - m_i..i {
            let (pk, sk, psk) = dirs[k % cfg.m_max]
                .as_ref()
                .expect("direction in truncation window");
            let coef = vecops::dot(&p, sk) / *psk;
            vecops::axpy(-coef, pk, &mut p);
        }
        let s = a.spmv(&p)?;
        let ps = vecops::dot(&p, &s);
        if ps <= T::zero() {
            return Err(Error::BreakdownZeroCurvature {
                iteration: i,
                curvature: ps.to_f64().unwrap_or(f64::NAN),
            });
        }
        let alpha = vecops::dot(&p, &r) / ps;
        vecops::axpy(alpha, &p, &mut u);
        vecops::axpy(-alpha, &s, &mut r);
        dirs[i % cfg.m_max] = Some((p, s, ps));

        let rel = (vecops::norm2(&r) / r0_norm).to_f64().unwrap_or(f64::NAN);
        record.rel_residual.push(rel);
        record.ms.push(start.elapsed().as_secs_f64() * 1e3);
        if rel <= cfg.tol {
            break;
        }
    }
    // Close the diagnostic arrays for the final iterate (one extra apply).
    if let Some(ue) = cfg.u_exact {
        push_diagnostics(a, precond, &u, &r, ue, &mut record)?;
    }
    Ok((u, record))
}

fn push_diagnostics<T: Scalar>(
    a: &CsrMatrix<T>,
    precond: &dyn Preconditioner<T>,
    u: &[T],
    r: &[T],
    u_exact: &[T],
    record: &mut ConvergenceRecord,
) -> Result<()> {
    let w = precond.apply(r);
    push_diagnostics_with_w(a, &w, u, u_exact, record)
}

fn push_diagnostics_with_w<T: Scalar>(
    a: &CsrMatrix<T>,
    w: &[T],
    u: &[T],
    u_exact: &[T],
    record: &mut ConvergenceRecord,
) -> Result<()> {
    let e = vecops::sub(u_exact, u);
    let err_norm = a_norm(a, &e)?;
    let dev = vecops::sub(w, &e);
    let dev_norm = a_norm(a, &dev)?;
    let eps = if err_norm > T::zero() {
        (dev_norm / err_norm).to_f64().unwrap_or(f64::NAN)
    } else {
        0.0
    };
    record
        .a_norm_error
        .as_mut()
        .expect("diagnostics enabled")
        .push(err_norm.to_f64().unwrap_or(f64::NAN));
    record.epsilon.as_mut().expect("diagnostics enabled").push(eps);
    Ok(())
}

fn check_dims(context: &'static str, n: usize, f_len: usize, u0_len: usize) -> Result<()> {
    if f_len != n {
        return Err(Error::DimensionMismatch { context, expected: n, got: f_len });
    }
    if u0_len != n {
        return Err(Error::DimensionMismatch { context, expected: n, got: u0_len });
    }
    Ok(())
}

/// Draw a standard-normal initial iterate of length `n`.
pub fn random_initial_guess<T: Scalar>(n: usize, seed: u64) -> Vec<T> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| T::standard_normal(&mut rng)).collect()
}
