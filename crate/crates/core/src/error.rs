//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the forecasting pipeline.
///
/// The variants are grouped by who is at fault: [`DatError::Config`] for bad
/// invocations or configuration files, [`DatError::Validation`] for input data
/// that fails an invariant, and the rest for runtime failures.
#[derive(Debug, Error)]
pub enum DatError {
    /// Invalid configuration or command usage.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violated a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed file contents (headers, shapes, magic numbers).
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Anything else that indicates a bug or unrecoverable runtime state.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, DatError>;

impl DatError {
    pub fn config(msg: impl Into<String>) -> Self {
        DatError::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        DatError::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        DatError::Format(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        DatError::Internal(msg.into())
    }
}
