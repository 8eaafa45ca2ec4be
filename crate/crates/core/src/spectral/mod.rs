//! Spectral operator machinery: Fourier and quadrature analysis/synthesis,
//! the operator parameters, and the forward/backward evaluation engine.

pub mod fourier;
pub mod quadrature;
pub mod sno;

pub use fourier::{max_modes_for_grid, CoeffGrid, ModeSet, SpectralPipe};
pub use quadrature::QuadratureBasis;
pub use sno::{
    sno_forward, SnoEngine, SnoParams, SnoPreconditioner, DEFAULT_LAYERS, DEFAULT_MODES,
    DEFAULT_WIDTH, INPUT_CHANNELS,
};
