use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("audio error: {0}")]
    Audio(String),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
