use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the read-channel library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ill-conditioned design: normal-equation condition number {condition:.3e}")]
    IllConditioned { condition: f64 },

    #[error("trellis too large: {states} states (limit {limit})")]
    TrellisTooLarge { states: usize, limit: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::IllConditioned { .. } => "ill-conditioned-design",
            Error::TrellisTooLarge { .. } => "trellis-too-large",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Parse(_) => "parse-error",
            Error::Io { .. } => "io-error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
