use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An invalid hyperparameter or configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data that cannot be processed (too short, empty, silent, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An API used in the wrong order or with the wrong kind of value.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN or infinity produced by a forward computation.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("wav error: {0}")]
    Wav(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
