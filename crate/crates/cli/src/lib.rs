//! Library side of the `mde` binary: configuration, commands and error mapping.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{dispatch, Command, Context};
pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::CliError;
