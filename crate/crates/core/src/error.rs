use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an op's contract.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Operand precisions differ.
    #[error("{op}: precision mismatch ({left:?} vs {right:?})")]
    Precision {
        op: &'static str,
        left: crate::tensor::Precision,
        right: crate::tensor::Precision,
    },

    /// A forward or backward computation produced NaN or an infinity.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("tape already consumed by a backward pass; record a new forward first")]
    TapeConsumed,

    #[error("batchnorm {0}: eval mode requested before running statistics exist")]
    MissingRunningStats(String),

    #[error("config: {0}")]
    Config(String),

    #[error("config: unknown keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated payload ({0})")]
    Truncated(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
