//! Experiment driver for return distributions of discounted LQR.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Command, RunOptions, RunReport};
pub use config::ExperimentConfig;
pub use error::CliError;
