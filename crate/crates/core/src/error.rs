//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by the pipeline.
///
/// `category()` yields the stable machine-parsable tag the CLI prints on
/// exit, so the variants map one-to-one onto operator-visible categories.
#[derive(Debug, Error)]
pub enum HctError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("range error: {0}")]
    Range(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HctError {
    /// Stable one-word category for machine-parsable CLI output.
    pub fn category(&self) -> &'static str {
        match self {
            HctError::Shape(_) => "shape",
            HctError::Config(_) => "config",
            HctError::Format(_) => "format",
            HctError::Contract(_) => "contract",
            HctError::Validation(_) => "validation",
            HctError::EmptyBatch => "empty-batch",
            HctError::Range(_) => "range",
            HctError::Oracle(_) => "oracle",
            HctError::TaskMismatch(_) => "task-mismatch",
            HctError::Io(_) => "io",
        }
    }
}
