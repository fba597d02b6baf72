//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine degenerated (singular covariance, non-finite
    /// intermediate, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A trajectory violates its structural invariants (ordering, length).
    #[error("malformed trajectory {id:?}: {reason}")]
    MalformedTrajectory { id: String, reason: String },

    /// Too few observations to fit a model.
    #[error("insufficient data: {got} observations, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    /// Map building produced no populated cells.
    #[error("empty map: no grid cell accumulated enough observations")]
    EmptyMap,

    /// A file or stream could not be parsed.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    /// A serialized document declares a format version this build cannot read.
    #[error("unsupported format version {found} (supported: {supported:?})")]
    UnsupportedFormatVersion { found: u32, supported: &'static [u32] },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
