//! File formats, training runs, reports and the `tab` command line on top
//! of `tab-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod report;

pub use error::{read_json, write_atomic, write_json, CliError, Result};
