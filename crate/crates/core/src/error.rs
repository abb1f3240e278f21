use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("step index {t} outside [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("missing input: expected {}", .0.display())]
    MissingInput(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config hash mismatch: artifact built with {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-parseable class name used by the CLI error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::MissingInput(_) => "missing_input",
            Error::Format { .. } => "format",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
