use std::fmt;
use std::path::{Path, PathBuf};

use gil_core::GilError;

/// A decoding failure at a byte offset into the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

impl FormatError {
    pub fn new(offset: usize, message: String) -> Self {
        FormatError { offset, message }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for FormatError {}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Run(GilError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => CliError::io(path, source),
            other => CliError::Config(format!("{}: {other:?}", path.display())),
        }
    }

    pub fn json(path: &Path, e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::io(path, e.into())
        } else {
            CliError::Config(format!("{}: {e}", path.display()))
        }
    }

    /// 1 for anything the user can fix by changing the invocation or the
    /// config, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Run(GilError::Config(_)) => 1,
            _ => 2,
        }
    }
}

impl From<GilError> for CliError {
    fn from(e: GilError) -> Self {
        CliError::Run(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
