use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("grid: {0}")]
    Grid(String),

    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("non-finite gradient at epoch {epoch}, step {step}")]
    NonFiniteGradient { epoch: usize, step: usize },

    #[error("unknown split `{0}`")]
    Split(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] vtg_core::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}
