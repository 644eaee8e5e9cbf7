use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("insufficient batch: batch normalization needs at least 2 samples, got {0}")]
    InsufficientBatch(usize),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category name, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::InsufficientBatch(_) => "batch",
            Error::Consistency(_) => "consistency",
            Error::Degenerate(_) => "degenerate",
            Error::Divergence(_) => "divergence",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
