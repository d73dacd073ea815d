use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid composition: {0}")]
    InvalidComposition(String),

    #[error("index out of vocabulary range: {0}")]
    Vocabulary(String),

    #[error("cannot normalize an all-zero mix")]
    SilentMix,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at batch entry {entry}")]
    NonFiniteLoss { entry: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },

    #[error("not enough samples for a stable covariance: have {have}, need {need}")]
    DegenerateSet { have: usize, need: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
