//! File formats, checkpoints, reports and the command line around `gil-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod formats;
pub mod report;
pub mod workers;

pub use error::{CliError, FormatError};
