//! Errors carrying the process exit code: 1 for runtime failures, 2 for
//! invalid configuration, usage or input format.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Runtime,
    Usage,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn runtime(err: impl Into<anyhow::Error>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            error: err.into(),
        }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            ErrorKind::Runtime => 1,
            ErrorKind::Usage => 2,
        }
    }

    /// Adds context in front of the message, keeping the kind.
    pub fn context(self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        CliError {
            kind: self.kind,
            error: self.error.context(ctx),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<prlab_core::Error> for CliError {
    fn from(e: prlab_core::Error) -> Self {
        CliError::runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
