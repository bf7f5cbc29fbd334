//! File formats, run configuration and commands for `grammask-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod lock;

pub use error::{CliError, Result};
