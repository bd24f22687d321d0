use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the transport-and-merge pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid input (shapes, ranges, marginals).
    #[error("validation error: {0}")]
    Validation(String),

    /// Duplicate tensor names or other container-level inconsistencies.
    #[error("container integrity error: {0}")]
    ContainerIntegrity(String),

    /// Bad magic bytes or unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// Truncated or otherwise undecodable payload.
    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("empty sequence for sample {sample}")]
    EmptySequence { sample: usize },

    /// A row or column of the cost matrix forbids all transport.
    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("numerical failure at iteration {iteration}: {detail}")]
    NumericalFailure { iteration: usize, detail: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    /// Plan artifacts do not belong to the containers they are applied to.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("unsupported scale: {0}")]
    UnsupportedScale(String),

    #[error("solver failure on {side} side: {source}")]
    Side {
        side: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::ContainerIntegrity(_) => "container_integrity",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::EmptySequence { .. } => "empty_sequence",
            Error::Infeasible(_) => "infeasible",
            Error::NumericalFailure { .. } => "numerical_failure",
            Error::MissingInput(_) => "missing_input",
            Error::Consistency(_) => "consistency",
            Error::UnsupportedScale(_) => "unsupported_scale",
            Error::Side { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
