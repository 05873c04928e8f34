//! Crate-wide error type.
//!
//! Everything fallible in this crate returns [`Error`]. The variants are
//! deliberately coarse: callers mostly want to know whether a failure was a
//! caller mistake (shape/index/parameter), a numerical blow-up, or an I/O or
//! file-format problem.

use crate::grid::GridShape;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A spatial index fell outside the grid.
    #[error("location ({w}, {h}) out of bounds for a {width}x{height} grid")]
    IndexOutOfBounds {
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    /// Two grids that must agree in shape did not.
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: GridShape, right: GridShape },

    /// Guidance scales outside their documented domain.
    #[error("invalid guidance scales: {0}")]
    InvalidScales(String),

    /// A condition referenced labels or subjects the model does not know.
    #[error("unknown condition: {0}")]
    UnknownCondition(String),

    /// A parameter outside its documented domain (counts, ranges, eta, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A required model was not supplied for the requested guidance mode.
    #[error("guidance mode {mode} requires a personalized model")]
    MissingPersonalizedModel { mode: &'static str },

    /// A latent stopped being finite while sampling.
    #[error("non-finite latent at timestep {t}")]
    NumericalDivergence { t: usize },

    /// A serialized artifact (grid, model, CSV) did not parse.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a [`Error::Format`] value.
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Shorthand for a [`Error::InvalidParameter`] value.
    pub(crate) fn param(detail: impl Into<String>) -> Self {
        Error::InvalidParameter(detail.into())
    }
}
