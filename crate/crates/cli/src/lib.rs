//! Command-line front end: model containers, packing, inference and benchmarks.

pub mod bench;
pub mod commands;
pub mod container;
pub mod error;

pub use error::{CliError, CliResult};
