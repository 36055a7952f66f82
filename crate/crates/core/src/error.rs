use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible parameterization: {0}")]
    Infeasible(String),

    #[error("degenerate model output: {0}")]
    Degenerate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidInstance(_) => "invalid-instance",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Infeasible(_) => "infeasible",
            Error::Degenerate(_) => "degenerate",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyData(_) => "empty-data",
            Error::Io { .. } => "io",
        }
    }
}
