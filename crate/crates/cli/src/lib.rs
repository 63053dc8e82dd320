//! Library half of the `convformer` binary: config files, checkpoints,
//! reports and the subcommands themselves, so they can be driven from
//! tests without spawning a process.

pub mod checkpoint;
pub mod commands;
pub mod config_file;
pub mod format;
pub mod metrics;
pub mod report;

use convformer_core::Error as CoreError;

/// A failed command. Usage errors (bad flags, presets, paths, shapes)
/// exit with status 2; failed checks and diverged runs with status 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged { .. } | CoreError::Graph(_) => CliError::Failure(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<config_file::ConfigError> for CliError {
    fn from(e: config_file::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}
