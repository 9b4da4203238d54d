//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, TrdqError>;

#[derive(Debug, Error)]
pub enum TrdqError {
    /// Incompatible dimensions, lengths, or divisibility constraints.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value outside the domain of the operation (NaN/Inf, empty input,
    /// out-of-range timestep, zero tensor for cosine similarity, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Calibration or pairing coverage is incomplete.
    #[error("coverage error: missing {}", .missing.join(", "))]
    Coverage { missing: Vec<String> },

    /// A serialized file failed validation.
    #[error("format error: {0}")]
    Format(String),

    /// A bank, trace, or flag set does not match the model configuration.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Invalid combination of command-line options.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrdqError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TrdqError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        TrdqError::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        TrdqError::Format(msg.into())
    }

    /// Process exit code for the command-line driver.
    ///
    /// 0 success, 1 usage, 2 I/O, 3 coverage/format, 4 config mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrdqError::Io(_) => 2,
            TrdqError::Coverage { .. } | TrdqError::Format(_) => 3,
            TrdqError::ConfigMismatch(_) => 4,
            TrdqError::Usage(_) | TrdqError::Shape(_) | TrdqError::Domain(_) => 1,
        }
    }
}
