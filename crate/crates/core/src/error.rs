use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: expected {expected}, observed {observed}")]
    Shape { expected: String, observed: String },

    #[error("shape underflow: {0}")]
    ShapeUnderflow(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),

    #[error("parameter shape mismatch:\n{0}")]
    ShapeDiff(String),

    #[error("unsplittable convolution {name}: {channels} output channels (need at least 3)")]
    Unsplittable { name: String, channels: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, observed: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            observed: observed.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
