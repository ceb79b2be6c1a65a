use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or record failed validation.
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    /// A stored or supplied tensor does not have the shape its context requires.
    #[error("shape mismatch for `{entry}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        entry: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported {format} format version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        format: &'static str,
        found: u32,
        supported: u32,
    },

    /// A named invariant of a loaded or produced artifact does not hold.
    #[error("invariant `{invariant}` violated: {detail}")]
    Invariant { invariant: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {what} at step {step}{}", dump.as_ref().map(|p| format!(" (batch dumped to {})", p.display())).unwrap_or_default())]
    NonFinite {
        what: String,
        step: u64,
        dump: Option<PathBuf>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse failure classes, used by the CLI to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFinite { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
