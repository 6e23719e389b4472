use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("batch too small for batch norm (got {0} rows)")]
    BatchTooSmall(usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty history")]
    EmptyHistory,
    #[error("template has {got} points but k = {k}")]
    TemplateTooSmall { got: usize, k: usize },
    #[error("insufficient tracklet length: need at least {needed} frames")]
    InsufficientTrackletLength { needed: usize },
    #[error("no target points in initial box")]
    NoTargetPoints,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("weight container: {0}")]
    Weights(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
