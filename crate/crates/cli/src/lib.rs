//! Command-line front end: configuration, checkpoints, run logs and the
//! experiment drivers behind the `agsm` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod logs;

pub use error::{CliError, Result};
pub mod experiments;
