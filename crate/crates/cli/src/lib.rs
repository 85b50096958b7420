//! Command implementations behind the `maskmamba` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod lock;

pub use error::{CliError, Result};
