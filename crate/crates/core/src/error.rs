//! Error types shared across the engine.

use thiserror::Error;

/// Unified error type for all engine operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or layout mismatch in a tensor operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unreadable file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A context selection referenced memories that are not in the store.
    /// `keys` lists the missing (block, frame) pairs.
    #[error("cache miss: missing entries {keys:?}")]
    CacheMiss { keys: Vec<(usize, u32)> },

    /// Violation of the dual-pipeline publication protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
