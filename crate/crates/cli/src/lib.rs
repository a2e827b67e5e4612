//! Library side of the `seqlora` command-line tool: config resolution,
//! the sweep runner, and the merge / metrics / inspect commands. The
//! binary in `main.rs` is a thin argument-parsing shell over these.

pub mod commands;
pub mod config;
pub mod run;

use thiserror::Error;

/// Errors surfaced by the CLI, each mapped to a process exit code:
/// configuration and usage problems exit 2, data and numeric problems
/// exit 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    pub fn config(err: impl std::fmt::Display) -> Self {
        CliError::Config(err.to_string())
    }

    pub fn data(err: impl std::fmt::Display) -> Self {
        CliError::Data(err.to_string())
    }
}
