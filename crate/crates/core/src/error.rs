use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ImputeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("malformed input: {0}")]
    Structure(String),

    #[error("cannot normalize feature '{feature}': {reason}")]
    Normalization { feature: String, reason: String },

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("mask generation failed: {message} (max achievable rate {max_rate:.4})")]
    Unreachable { message: String, max_rate: f64 },

    #[error("invalid mask parameters: {0}")]
    MaskParams(String),

    #[error("non-finite value in {location}")]
    Numeric { location: String },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("imputation failed: {0}")]
    Imputation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ImputeError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        ImputeError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn numeric(location: impl Into<String>) -> Self {
        ImputeError::Numeric {
            location: location.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ImputeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            ImputeError::Config(_) | ImputeError::MaskParams(_) => ErrorKind::Usage,
            ImputeError::Numeric { .. } | ImputeError::Diverged { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
