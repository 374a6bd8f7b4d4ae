use alloc::string::String;

/// Errors raised by the analysis, design and simulation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    /// The delay-indexed chain was cut at `d_max` while a non-negligible
    /// amount of idle-state mass still lives beyond it.
    #[error("delay truncation at D_max = {d_max} leaves an idle-state mass deficit of {deficit:e}; increase D_max")]
    Truncation { d_max: usize, deficit: f64 },

    #[error("fixed point did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Mass fell off the edge of a density grid.
    #[error("density grid too narrow: {boundary_mass:e} of the mass lies outside the support; widen the grid")]
    Support { boundary_mass: f64 },

    #[error("degenerate density operation: {0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;
