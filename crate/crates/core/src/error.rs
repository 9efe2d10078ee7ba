use std::path::PathBuf;

use thiserror::Error;

use crate::model::TransformerParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no embedding for text {0:?}")]
    MissingEmbedding(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("label {label} is not in the vocabulary (size {vocab_size})")]
    VocabularyMismatch { label: usize, vocab_size: usize },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("sequence of {tokens} tokens exceeds capacity {capacity}")]
    Capacity { tokens: usize, capacity: usize },
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error("non-finite values after {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        checkpoint: Box<TransformerParams>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
