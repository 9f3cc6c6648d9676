//! Command-line workflows and the local HTTP service for sketch cleanup
//! and retrieval.

pub mod commands;
pub mod pipeline;
pub mod service;

use thiserror::Error;

pub use commands::{run, Cli};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sketchclean::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for bad arguments or input, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            _ => 1,
        }
    }
}
