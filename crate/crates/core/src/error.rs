//! Error type shared across the library.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A byte stream does not match its expected on-disk format.
    #[error("{path}: {message} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// An operation was called before its prerequisites (e.g. backward
    /// before forward).
    #[error("invalid state: {0}")]
    State(String),

    /// A runtime input (function argument, CLI value) is unusable.
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced or encountered non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
