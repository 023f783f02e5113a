use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model parameters are not initialized")]
    Uninitialized,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("failed to load dataset from {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("unknown dataset format `{0}`")]
    UnknownFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("feature cache error: {0}")]
    Cache(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
}
