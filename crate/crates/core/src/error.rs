use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("not a valid state: {0}")]
    InvalidState(String),

    #[error("vector is not unit norm (norm {0})")]
    NotUnitNorm(f64),

    #[error("probabilities outside (0, 1): p = {p}, q = {q}")]
    InvalidProbability { p: f64, q: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("jump requested at zero intensity (Tr J = {0:e})")]
    ZeroIntensityJump(f64),

    #[error("integrator failure: {0}")]
    Integrator(String),

    #[error("{field}: {message}")]
    Config { field: String, message: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
