//! Command implementations behind the `mziln` binary.

pub mod commands;
pub mod error;
pub mod ingest;
pub mod output;

pub use error::{CliError, Result};
