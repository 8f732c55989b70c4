//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by model construction, simulation, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A matrix that must be invertible turned out singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A numerical routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn singular(msg: impl Into<String>) -> Self {
        Error::Singular(msg.into())
    }
}
