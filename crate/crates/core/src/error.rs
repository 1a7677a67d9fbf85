use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Argument(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// Inference would exceed the configured memory budget.
    #[error("{0}")]
    Resource(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: &'static str, step: u64 },

    #[error("device: {0}")]
    Device(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn arg(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-parsable category, shared by the service and the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Argument(_) => "argument",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Resource(_) => "resource",
            Error::NonFinite { .. } => "numeric",
            Error::Device(_) => "device",
        }
    }
}
