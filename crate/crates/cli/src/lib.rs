//! Command implementations and file formats behind the `splagger` binary.

pub mod commands;
pub mod io;

use splagger_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for anything the user can fix in the invocation or config, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config { .. } | Error::Parse(_) | Error::Unknown { .. }) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
