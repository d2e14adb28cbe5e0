//! Experiment driver for flow-based filtering: configuration, file formats
//! and the `fbf` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
