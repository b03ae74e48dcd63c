use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("no articles")]
    NoArticles,

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid embedding file: {0}")]
    InvalidEmbeddings(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector ({0})")]
    ZeroNorm(&'static str),

    #[error("missing embedding for id {0:?}")]
    MissingEmbedding(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("insufficient candidates: need {needed}, found {found}")]
    InsufficientCandidates { needed: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("model kind mismatch: checkpoint is {checkpoint}, config asks for {config}")]
    KindMismatch { checkpoint: String, config: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
