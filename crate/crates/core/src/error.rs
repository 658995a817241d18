use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow { path: PathBuf, line: usize, reason: String },

    #[error("agent {agent}: duplicate or non-increasing frame {frame}")]
    NonMonotonicFrames { agent: String, frame: i64 },

    #[error("{path}:{line}: unknown agent class {class:?}")]
    UnknownClass { path: PathBuf, line: usize, class: String },

    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("source rate {src_fps} Hz is not an integer multiple of 2.5 Hz")]
    NonIntegerDecimation { src_fps: f64 },

    #[error("trajectory of {len} states is too short (need at least {needed})")]
    TooShort { len: usize, needed: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("expected {expected} items, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid value {value:?} for config key `{key}`")]
    InvalidConfigValue { key: String, value: String },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
