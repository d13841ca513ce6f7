//! Library side of the `dualbounds` command-line tool: configuration,
//! CSV ingestion and report rendering. `main.rs` only parses flags.

pub mod config;
pub mod data;
pub mod error;
pub mod run;

pub use error::CliError;
