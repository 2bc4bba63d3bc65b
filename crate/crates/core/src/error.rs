use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("delimited data error: {0}")]
    Csv(#[from] csv::Error),

    #[error("not enough subjects: need {needed}, have {available}")]
    InsufficientSubjects { needed: usize, available: usize },

    #[error("subject `{subject}` has {available} samples, need more than {needed}")]
    InsufficientSamples {
        subject: String,
        available: usize,
        needed: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },

    #[error("triplet stream exhausted after {consumed} of {budget} triplets")]
    TripletStreamExhausted { consumed: usize, budget: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible experiment: {0}")]
    Infeasible(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn row(path: impl Into<PathBuf>, row: usize, message: impl Into<String>) -> Self {
        Error::MalformedRow {
            path: path.into(),
            row,
            message: message.into(),
        }
    }
}
