use thiserror::Error;

/// Errors surfaced by the tensor engine and everything built on top of it.
#[derive(Error, Debug)]
pub enum FuseError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward called without an active graph")]
    NoActiveGraph,

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("{op}: index {index} out of range ({limit})")]
    IndexOutOfRange { op: String, index: usize, limit: usize },

    #[error("attention: query row {row} has no permitted keys")]
    FullyMaskedRow { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FuseError {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        FuseError::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FuseError>;
