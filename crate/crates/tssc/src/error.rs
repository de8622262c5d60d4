use std::path::{Path, PathBuf};

pub type Result<T, E = TsscError> = std::result::Result<T, E>;

/// Process exit codes. Stable for scripting.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum TsscError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("invalid configuration {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] tssc_core::Error),
}

impl TsscError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        TsscError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        TsscError::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        TsscError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            TsscError::Usage(_) | TsscError::Config { .. } => exit::USAGE,
            TsscError::Io { .. } | TsscError::Format { .. } => exit::IO,
            TsscError::Core(tssc_core::Error::Config(_)) => exit::USAGE,
            TsscError::Core(_) => exit::NUMERIC,
        }
    }
}
