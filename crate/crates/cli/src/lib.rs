//! Library side of the `qnet` command: configuration parsing, the
//! subcommands and image export. `main.rs` only maps arguments onto these.

pub mod commands;
pub mod config;
pub mod pgm;

pub use commands::{CliError, CliResult};
