use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TabiiError>;

#[derive(Debug, Error)]
pub enum TabiiError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("csv parse error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding cache miss for key {0}")]
    CacheMiss(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("model is not trained: {0}")]
    Untrained(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TabiiError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TabiiError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TabiiError::Io {
            path: path.into(),
            source,
        }
    }
}
