//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no cached embedding for image id `{0}`")]
    MissingEmbedding(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("empty caption: {0}")]
    EmptyCaption(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    Vocabulary { token: u32, vocab: usize },

    #[error("backend `{backend}` does not support {capability}")]
    Capability { backend: String, capability: String },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("not a probability vector: {0}")]
    NotNormalized(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("stage sequencing error: {0}")]
    Sequencing(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("parse error at byte {offset} (line {line}, column {column}): {reason}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("dangling annotation references: unknown image ids {0:?}")]
    DanglingReference(Vec<i64>),

    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
