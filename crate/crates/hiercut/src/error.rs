use std::path::Path;

use hiercut_core::train::TrainError;
use hiercut_core::diffnet::NetError;
use thiserror::Error;

/// Failure of a command, split by who has to act on it.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags or arguments.
    #[error("{0}")]
    Usage(String),
    /// Input files or values that fail validation.
    #[error("{0}")]
    Data(String),
    /// Failures while running: non-finite losses, unwritable outputs.
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) => 2,
            Error::Runtime(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Prefixes the message with `context`, keeping the kind.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::Usage(m) => Error::Usage(format!("{context}: {m}")),
            Error::Data(m) => Error::Data(format!("{context}: {m}")),
            Error::Runtime(m) => Error::Runtime(format!("{context}: {m}")),
        }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Net(NetError::NonFiniteGradient { .. }) => {
                Error::Runtime(e.to_string())
            }
            other => Error::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Runtime(format!("cannot create {}: {e}", dir.display())))
}
