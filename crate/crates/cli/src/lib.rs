//! Study runner for risk-aware crop management optimization: configuration,
//! the location × year × strategy × alpha experiment grid, and reports.

pub mod config;
pub mod experiment;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing files, unreadable weather, simulator setup (exit code 4).
    #[error("{0}")]
    Environment(String),

    /// The run finished but some cells failed (exit code 3).
    #[error("{failed} of {total} cells failed")]
    PartialFailure { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::PartialFailure { .. } => 3,
            CliError::Environment(_) => 4,
        }
    }
}

impl From<cropopt::Error> for CliError {
    fn from(e: cropopt::Error) -> Self {
        match e {
            cropopt::Error::Domain(_) => CliError::Config(e.to_string()),
            other => CliError::Environment(other.to_string()),
        }
    }
}
