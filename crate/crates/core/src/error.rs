use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("solver stagnated after {iterations} iterations, best relative residual {best:.3e}")]
    Stagnation {
        iterations: usize,
        best: f64,
        history: Vec<f64>,
    },

    #[error("energy increased at iteration {iteration}: {before:.17e} -> {after:.17e}")]
    DescentViolation {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("preset {preset}: {reason}")]
    PresetConstraint { preset: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Runtime diagnostics (as opposed to bad input or usage).
    pub fn is_diagnostic(&self) -> bool {
        matches!(
            self,
            Error::Stagnation { .. } | Error::DescentViolation { .. } | Error::NonFinite(_)
        )
    }
}
