//! Experiment driver for adaptive semantic consistency: config files,
//! checkpoints, result CSVs and the `asc` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{Overrides, Study, World};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use report::{ResultRow, HEADER};
