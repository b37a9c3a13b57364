use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The scripted expert cannot bring the episode to completion.
    #[error("expert cannot recover: {0}")]
    Unrecoverable(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}:{line}: {reason}")]
    CorruptLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("intervention source disconnected: {0}")]
    Disconnected(String),

    /// The operator abandoned the running rollout (a reset request).
    #[error("rollout aborted: {0}")]
    Aborted(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image encoding error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors raised while reading persisted data whose layout does not match
    /// what this build understands.
    pub fn is_schema(&self) -> bool {
        matches!(self, Error::Schema(_) | Error::CorruptLine { .. })
    }
}
