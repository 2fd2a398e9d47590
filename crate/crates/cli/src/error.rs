use std::path::PathBuf;

use deepfake_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },

    #[error("checkpoint unavailable: {0}")]
    MissingCheckpoint(String),

    #[error("run verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::Verification(_) => 1,
            CliError::Core(e) => core_exit_code(e),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            reason: e.to_string(),
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::InvalidConfig(_) | CoreError::InvalidStats(_) => 2,
        CoreError::Io { .. } | CoreError::Decode { .. } => 3,
        CoreError::Checkpoint(_) => 4,
        CoreError::StageAborted { source, .. } => core_exit_code(source),
        _ => 1,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
