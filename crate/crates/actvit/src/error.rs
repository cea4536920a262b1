//! Crate-wide error type.
//!
//! The variants map onto the CLI exit codes: config errors exit 2, protocol
//! violations exit 3, numeric failures exit 4, everything else exits 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates an invariant (shape mismatch, non-finite entries,
    /// unregistered LLM, inconsistent manifest, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration file or parameter set is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// An experiment would leak evaluation data into training, or evaluate
    /// on data the protocol forbids.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Training diverged or produced non-finite numbers.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A serialized artifact (shard, model archive, manifest) is unreadable.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
