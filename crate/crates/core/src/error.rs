//! Crate-wide error type.

use thiserror::Error;

/// Errors shared by the solvers, preconditioners, operators and I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("coefficient field must be strictly positive (min entry {min})")]
    NonPositiveCoefficient { min: f64 },

    #[error("gave up resampling coefficient field after {attempts} draws")]
    ResampleLimitExceeded { attempts: usize },

    #[error("matrix is not positive definite: v'Av = {quadratic_form}")]
    NotPositiveDefinite { quadratic_form: f64 },

    #[error("solver did not converge after {iterations} iterations (relative residual {rel_residual})")]
    DidNotConverge {
        iterations: usize,
        rel_residual: f64,
    },

    #[error("curvature breakdown at iteration {iteration}: <p, Ap> = {curvature} <= 0")]
    BreakdownZeroCurvature { iteration: usize, curvature: f64 },

    #[error("preconditioner returned a non-finite value at iteration {iteration}")]
    NonFinitePreconditioner { iteration: usize },

    #[error("zero diagonal entry at row {row}")]
    ZeroDiagonal { row: usize },

    #[error("zero pivot at row {row} during incomplete factorization")]
    ZeroPivot { row: usize },

    #[error("degenerate training sample: e'Ae = {quadratic_form} <= 0")]
    DegenerateSample { quadratic_form: f64 },

    #[error("non-finite gradient encountered in {context}")]
    NonFiniteGradient { context: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
