use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span [{start}, {end}]: need 0 <= start < end <= 1")]
    InvalidSpan { start: f64, end: f64 },

    #[error("invalid moment (center {center}, width {width})")]
    InvalidMoment { center: f64, width: f64 },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("every position of the {0} sequence is masked")]
    AllMasked(&'static str),

    #[error("cannot collate an empty batch")]
    EmptyBatch,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{gt} ground-truth moments exceed {queries} moment queries")]
    TooManyMoments { gt: usize, queries: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Annotation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("feature file {path}: {message}")]
    Feature { path: PathBuf, message: String },

    #[error("feature file not found: {0}")]
    MissingFeature(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
