//! Error type shared across the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error at line {line}: {message}")]
    ParseRow { line: usize, message: String },

    #[error("insufficient qualifying samples for class '{class}': need {needed}, found {found}")]
    InsufficientSamples {
        class: String,
        needed: usize,
        found: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("undefined ratio: empty input")]
    UndefinedRatio,

    #[error("no scorable predictions for subtask {subtask}")]
    NoScorablePredictions { subtask: String },

    #[error("degenerate text: word or sentence count is zero")]
    DegenerateText,

    #[error("degenerate embedding: zero vector")]
    DegenerateEmbedding,

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("http status {status}: {message}")]
    HttpStatus { status: u16, message: String },

    #[error("missing model column: {0}")]
    MissingModel(String),

    #[error("internal consistency error: {0}")]
    Internal(String),
}
