use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: buffer holds {available}, requested {requested}")]
    InsufficientSamples { available: usize, requested: usize },

    #[error("bad action {action}: environment has {num_actions} actions")]
    BadAction { action: usize, num_actions: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero evidence: every source assigns zero likelihood to the transition")]
    ZeroEvidence,

    #[error("sources not found: {0}")]
    SourcesNotFound(String),

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("bad maze layout: {0}")]
    BadLayout(String),

    #[error("pretraining failed: {0}")]
    PretrainFailed(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("singular linear system")]
    Singular,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
