// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use crate::mask::StepRecord;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, indices or option values that violate an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Data that cannot be used (empty corpus, too-short stream, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// NaN or infinity produced by the named operation.
    #[error("numeric failure in {op}: {detail}")]
    NumericFailure { op: String, detail: String },

    /// Language-model training diverged. `last_good_step` is the step of the
    /// last checkpoint that was kept.
    #[error("training failure at step {step}: {detail} (last good checkpoint: step {last_good_step})")]
    TrainingFailure {
        step: u64,
        last_good_step: u64,
        detail: String,
    },

    /// A loss spike was not recovered early enough; the caller should retrain.
    #[error("unrecovered loss spike at step {step}; retrain required")]
    RetrainSignal { step: u64, log: Vec<StepRecord> },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("undefined similarity between layers {i} and {j}")]
    UndefinedSimilarity { i: usize, j: usize },

    #[error("no subnetwork qualifies for selection: {0}")]
    SelectionFailure(String),

    #[error("held-out data overlaps training data: {0}")]
    Contamination(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    /// Malformed artifact file (bad magic, truncated payload, bad JSON).
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// Short machine-readable kind, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidInput(_) => "invalid-input",
            Error::Io { .. } => "io-error",
            Error::NumericFailure { .. } => "numeric-failure",
            Error::TrainingFailure { .. } => "training-failure",
            Error::RetrainSignal { .. } => "retrain-signal",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::UndefinedSimilarity { .. } => "undefined-similarity",
            Error::SelectionFailure(_) => "selection-failure",
            Error::Contamination(_) => "contamination-error",
            Error::Provenance(_) => "provenance-error",
            Error::Format { .. } => "format-error",
        }
    }
}
