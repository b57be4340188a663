use std::path::{Path, PathBuf};

use thiserror::Error;
use vragent_core::backends::BackendError;
use vragent_core::eval::EvalError;
use vragent_core::rar::RarError;
use vragent_core::search::{JournalError, SearchError};
use vragent_core::trajectory::TrajectoryError;
use vragent_core::vte::VteError;
use vragent_core::InvalidInput;

/// Operator-facing failure. Each variant has its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("backend unavailable: {0}")]
    Backend(String),
    #[error("{0}")]
    Journal(String),
    #[error("replay mismatch: {0}")]
    Mismatch(String),
    #[error("invalid data: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Backend(_) => 5,
            CliError::Journal(_) => 6,
            CliError::Mismatch(_) => 7,
            CliError::Data(_) => 8,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), message: err.to_string() }
    }

    /// Names the file an IO error came from; other variants get the path
    /// as a prefix.
    pub fn at(self, path: &Path) -> Self {
        let shown = path.display();
        match self {
            CliError::Io { message, .. } => CliError::Io { path: path.to_path_buf(), message },
            CliError::Journal(m) => CliError::Journal(format!("{shown}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{shown}: {m}")),
            other => other,
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Backend(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<InvalidInput> for CliError {
    fn from(e: InvalidInput) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<JournalError> for CliError {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::Io(err) => unlocated(err),
            other => CliError::Journal(other.to_string()),
        }
    }
}

impl From<RarError> for CliError {
    fn from(e: RarError) -> Self {
        match e {
            RarError::Backend(b) => b.into(),
            RarError::Io(err) => unlocated(err),
            other => CliError::Data(format!("knowledge base: {other}")),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(err) => unlocated(err),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrajectoryError> for CliError {
    fn from(e: TrajectoryError) -> Self {
        match e {
            TrajectoryError::IoFailure(err) => unlocated(err),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<VteError> for CliError {
    fn from(e: VteError) -> Self {
        match e {
            VteError::Io(m) => CliError::Io { path: PathBuf::new(), message: m },
            other => CliError::Data(other.to_string()),
        }
    }
}

/// IO error whose path is filled in later by [`CliError::at`].
fn unlocated(err: std::io::Error) -> CliError {
    CliError::Io { path: PathBuf::new(), message: err.to_string() }
}
