use std::fmt;

use bicr_core::Error;

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Unreadable or invalid configuration (exit 2).
    Config(String),
    /// Training produced non-finite values (exit 3).
    Diverged(String),
    /// A check ran to completion and failed (exit 4).
    Verdict(String),
    /// Anything else: I/O, corrupted artifacts, protocol misuse (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Diverged(_) => 3,
            Self::Verdict(_) => 4,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Diverged(m) => write!(f, "divergence: {m}"),
            Self::Verdict(m) => write!(f, "check failed: {m}"),
            Self::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Self::Config(m),
            Error::TrainingDiverged(_) => Self::Diverged(e.to_string()),
            Error::DegenerateVector { norm, .. } if !norm.is_finite() => Self::Diverged(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(format!("json: {e}"))
    }
}
