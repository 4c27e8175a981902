//! Library side of the `lawin` command: run configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;

pub use config::{DataConfig, RunConfig};
