//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: configuration
//! and usage problems exit with 2, everything else (I/O, bad data files,
//! numeric failures) exits with 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An API was called in a way its contract forbids (non-scalar loss,
    /// missing gradients, budget larger than the candidate set, ...).
    #[error("invalid usage: {0}")]
    Usage(String),

    /// A configuration value or combination of values is invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A data or checkpoint file does not match its documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// Dense enumeration was refused because the task pool is too large.
    #[error("task pool too large: {0}")]
    PoolTooLarge(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI uses for this error: 2 for config/usage errors,
    /// 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidConfig(_) | Error::Usage(_) => 2,
            _ => 1,
        }
    }
}
