//! Command-line driver: `generate`, `train`, `eval` and `curve`, each driven
//! by a `key=value` config file.

pub mod commands;
pub mod config;

pub use commands::{run, CliError, Command, Options};
pub use config::RunConfig;
