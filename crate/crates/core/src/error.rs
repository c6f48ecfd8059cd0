use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("model state contains a non-finite component at index {index}")]
    NonFinite { index: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("mini-batch is empty")]
    EmptyBatch,

    #[error("{workers} workers requested but the dataset only has {points} points")]
    TooManyWorkers { workers: usize, points: usize },

    #[error("worker {0} attempted to send to itself")]
    SelfSend(usize),

    #[error("virtual time moved backwards: {now} < {previous}")]
    TimeRegression { now: f64, previous: f64 },

    #[error(
        "could not place {k} centers with pairwise distance >= {min_dist} in a box of half-width {half_width} (n={n}) after {attempts} attempts"
    )]
    Placement {
        k: usize,
        n: usize,
        min_dist: f64,
        half_width: f64,
        attempts: usize,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        }
    }

    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
