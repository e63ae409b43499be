//! Batch pipeline around the drypar core: configuration, artifact files,
//! manifest bookkeeping and the stage orchestration used by the `drypar`
//! binary.

pub mod config;
pub mod formats;
pub mod manifest;
pub mod pipeline;

use drypar_core::CoreError;

/// Failure classes mapped onto the process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad configuration, schema violation, missing or malformed file.
    Config,
    /// Solver, reduction or estimation failure at runtime.
    Numerical,
    /// A validation check ran and failed.
    Validation,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Numerical => 3,
            FailureKind::Validation => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Config,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Numerical,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Validation,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match e {
            CoreError::InvalidArgument(_)
            | CoreError::DimensionMismatch(_)
            | CoreError::InvalidMask(_) => FailureKind::Config,
            _ => FailureKind::Numerical,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(format!("io error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
