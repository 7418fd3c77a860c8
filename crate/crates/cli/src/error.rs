use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(asc_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 2 usage, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Format(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<asc_core::Error> for CliError {
    fn from(e: asc_core::Error) -> Self {
        match e {
            asc_core::Error::Numeric(m) => CliError::Numeric(m),
            asc_core::Error::Format(m) => CliError::Format(m),
            other => CliError::Core(other),
        }
    }
}
