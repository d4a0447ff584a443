use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed grid {path}: {msg}")]
    Grid { path: PathBuf, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no valid patch found after {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("extrapolation split: {0}")]
    ExtrapolationSplit(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Grid { .. }
            | Error::Shape(_)
            | Error::Config(_)
            | Error::ExtrapolationSplit(_)
            | Error::Json(_) => true,
            Error::Epoch { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
