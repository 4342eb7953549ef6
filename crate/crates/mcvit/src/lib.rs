//! Standard-library companion of `mcvit-core`: the raw-tensor file format,
//! JSON run configurations, checkpoints, CSV emitters, wall-clock
//! instrumentation, and the CLI subcommand implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod empirical;
pub mod error;
pub mod format;

pub use error::{CliError, Result};
