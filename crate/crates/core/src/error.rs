use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("wrong file kind: {0}")]
    WrongKind(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("no observed coordinates to condition on")]
    EmptyObserved,

    #[error("sample has no missing coordinates")]
    EmptyMask,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
