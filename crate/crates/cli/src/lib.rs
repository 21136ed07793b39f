//! Stage-separated pipeline commands: expand, generate, label, export and
//! visualize. Later stages work from the dataset root alone.

use thiserror::Error;

pub mod commands;
pub mod config;

pub use commands::{Cli, Command};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_BACKEND: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("all {total} generation requests failed; last error: {last}")]
    Backend { total: usize, last: String },
    #[error("{failed} of {total} generation requests failed")]
    Partial { failed: usize, total: usize },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Other(_) => EXIT_VALIDATION,
            CliError::Backend { .. } => EXIT_BACKEND,
            CliError::Partial { .. } => EXIT_PARTIAL,
        }
    }
}

impl From<diffuforge_core::dataset::DatasetError> for CliError {
    fn from(e: diffuforge_core::dataset::DatasetError) -> Self {
        CliError::Other(e.into())
    }
}
