use std::path::PathBuf;

/// Every failure the crate can report. The variants group into the four
/// categories the command line exposes as exit codes (config, data, numeric, io).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error ({}): {msg}", path.display())]
    Ingest { path: PathBuf, msg: String },

    #[error("numerical error at step {step}: {msg}")]
    Numeric { step: u64, msg: String },

    #[error("i/o error ({}): {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported {what} format version {found} (this build reads up to {supported})")]
    UnsupportedVersion {
        what: String,
        found: u32,
        supported: u32,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, shared by the CLI exit codes and the C status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Io => 5,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingest(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::UnsupportedVersion { .. } => {
                ErrorCategory::Config
            }
            Error::Data(_) | Error::Ingest { .. } | Error::Integrity(_) => ErrorCategory::Data,
            Error::Numeric { .. } | Error::Backend(_) => ErrorCategory::Numeric,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
