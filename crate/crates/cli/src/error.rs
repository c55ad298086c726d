use std::path::{Path, PathBuf};

use choreo_models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("malformed condition: {0}")]
    MalformedCondition(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] choreo_core::Error),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 2 validation, 3 i/o, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Image { .. } | CliError::MissingCheckpoint(_) => 3,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Model(e) if e.is_io() => 3,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Model(e) if e.is_numeric() => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
