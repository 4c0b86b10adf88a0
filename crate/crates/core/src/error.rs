use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {}: {message}", path.display())]
    Load { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("caption {0:?} is not present in the embedding table")]
    Lookup(String),

    #[error("shape mismatch at {stage}: expected {expected}, got {got}")]
    Shape {
        stage: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in loss term {term} at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("image error: {0}")]
    Image(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        stage: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            stage: stage.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
