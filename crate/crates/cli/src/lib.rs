//! Command-line workflows over `disc-core`: preprocessing a WAV corpus into a
//! feature cache, training, conversion, evaluation and inspection.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
