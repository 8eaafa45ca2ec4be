//! Learned and classical preconditioning for flexible conjugate gradients on
//! discretized 2D elliptic problems.
//!
//! The crate generates random elliptic systems, solves them with CG/FCG
//! under classical preconditioners (Jacobi, symmetric Gauss-Seidel, ILU) or
//! a trained spectral operator, and reproduces the iteration-count and
//! convergence-diagnostic experiments behind the `fcgno` CLI.
//!
//! The numeric core is generic over the scalar type through [`Scalar`];
//! the experiment drivers and file formats pin `f64` (see the aliases
//! below).

pub mod bench;
pub mod error;
pub mod io;
pub mod krylov;
pub mod precond;
pub mod problems;
pub mod scalar;
pub mod simd;
pub mod sparse;
pub mod spectral;
pub mod training;
pub mod vecops;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type the experiment drivers run at.
pub type Real = f64;
/// Sparse matrix at driver precision.
pub type Csr = sparse::CsrMatrix<Real>;
/// Grid field at driver precision.
pub type Field = problems::ScalarField<Real>;
/// Problem instance at driver precision.
pub type Problem = problems::ProblemInstance<Real>;
/// Operator parameters at driver precision.
pub type SnoParams = spectral::SnoParams<Real>;
