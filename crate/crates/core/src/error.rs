use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("degenerate pair {id:?} at line {line}: both sentences are identical")]
    DegeneratePair { id: String, line: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("sequence of length {len} exceeds the context window of {window}")]
    ContextWindow { len: usize, window: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("adapter shape mismatch: {}", .0.join(", "))]
    ShapeMismatch(Vec<String>),

    #[error("base model mismatch: adapter was trained on {expected:?}, target is {found:?}")]
    BaseMismatch { expected: String, found: String },

    #[error("misaligned batch: {0}")]
    Misaligned(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
