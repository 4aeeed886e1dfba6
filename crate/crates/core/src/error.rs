use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training and retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("non-finite value in {term}")]
    Numeric { term: String },

    #[error("build error: {0}")]
    Build(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::LabelRange { .. } => "label-range",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Sampling(_) => "sampling",
            Error::Numeric { .. } => "numeric",
            Error::Build(_) => "build",
            Error::Validation(_) => "validation",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
