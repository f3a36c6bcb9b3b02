//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for all fedaq operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement; names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed, out-of-range, or non-finite data.
    #[error("data error: {0}")]
    Data(String),

    /// Serialization/deserialization failure (layouts, weights, files).
    #[error("codec error: {0}")]
    Codec(String),

    /// Dirichlet partitioning could not satisfy its constraints.
    #[error("partition failed: {0}")]
    Partition(String),

    /// FedAvg aggregation precondition violated.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Wire protocol violation (framing, CRC, version, unexpected message).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// TLS identity not acceptable (no chain to federation root, expired, ...).
    #[error("authentication failed: {0}")]
    Auth(String),

    /// A synchronous barrier was not met in time.
    #[error("timed out: {0}")]
    Timeout(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for scripting: 0 success, 2 config/usage,
    /// 3 data, 4 auth, 5 protocol/timeout.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) | Error::Data(_) | Error::Codec(_) | Error::Partition(_) => 3,
            Error::Auth(_) => 4,
            Error::Protocol(_) | Error::Timeout(_) | Error::Aggregation(_) => 5,
            Error::Io(_) => 3,
        }
    }
}
