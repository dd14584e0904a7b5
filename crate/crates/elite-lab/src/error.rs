//! Error type shared across the crate, with a stable mapping to process
//! exit codes for the command-line front end.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (bad argument, wrong call order).
    #[error("contract error: {0}")]
    Contract(String),

    /// A computation produced a non-finite value or diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A sequence exceeds a configured maximum length.
    #[error("length error: {0}")]
    Length(String),

    /// I/O failure while reading or writing files.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A checkpoint file is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Exit code used by the CLI: 3 for numeric failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
