use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unsupported frame rate: {0}")]
    UnsupportedRate(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("parse error at line {line}, field `{path}`: {message}")]
    Parse {
        line: usize,
        path: String,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
