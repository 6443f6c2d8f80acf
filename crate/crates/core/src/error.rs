use std::path::PathBuf;

/// Errors produced by the segmentation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingest error: {dimension} = {value} is not divisible by patch size {patch}")]
    Ingest {
        dimension: &'static str,
        value: usize,
        patch: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("no prompt")]
    NoPrompt,
    #[error("empty ground truth")]
    EmptyGroundTruth,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid data in {path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tracker produced a {actual:?} mask at frame {frame}, expected {expected:?}")]
    TrackerShape {
        frame: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("adapter failure: {0}")]
    Adapter(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
