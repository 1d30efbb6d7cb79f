//! Driver for the `pbev` binary: self-tests, kernel benchmarks, sparse
//! inference sweeps, toy training and evaluation on the synthetic benchmark,
//! with CSV and SVG output.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod svg;
pub mod sweep;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
