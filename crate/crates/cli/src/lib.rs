//! Experiment driver: config parsing, subcommands, artifact export.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Command};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
