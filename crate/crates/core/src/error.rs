//! Crate-wide error type.

use crate::types::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation failed with {} violation(s): {}", violations.len(), summarize(violations))]
    Validation { violations: Vec<Violation> },

    #[error("unknown slot `{slot}`")]
    UnknownSlot { slot: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("split fraction 1/{denominator} not available for dataset `{name}` with {size} turns")]
    FractionUnavailable {
        name: String,
        denominator: u32,
        size: usize,
    },

    #[error("cannot subsample {requested} from {available} examples")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("model error: {0}")]
    Model(String),

    #[error("non-finite loss at stage `{stage}`, step {step}: {loss}")]
    NonFiniteLoss {
        stage: String,
        step: usize,
        loss: f64,
    },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("missing predictions for {} qid(s), e.g. {}", qids.len(), qids.iter().take(5).cloned().collect::<Vec<_>>().join(", "))]
    MissingPredictions { qids: Vec<String> },

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::UnknownSlot { .. } => "unknown-slot",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::FractionUnavailable { .. } => "fraction-unavailable",
            Error::SampleTooLarge { .. } => "sample-too-large",
            Error::Model(_) => "model",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Schedule(_) => "schedule",
            Error::MissingPredictions { .. } => "missing-predictions",
            Error::Checkpoint { .. } => "checkpoint",
        }
    }
}

fn summarize(violations: &[Violation]) -> String {
    let shown: Vec<String> = violations.iter().take(3).map(|v| v.to_string()).collect();
    let mut s = shown.join("; ");
    if violations.len() > 3 {
        s.push_str(", ...");
    }
    s
}
