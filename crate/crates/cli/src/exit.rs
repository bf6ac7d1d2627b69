//! Process exit codes.

use fcdn_core::Error;

/// Configuration or usage error.
pub const USAGE: i32 = 64;
/// Input data in the wrong format.
pub const DATA: i32 = 65;
/// Numerical failure (NaN or infinite values).
pub const NUMERICAL: i32 = 2;
/// Anything else, I/O included.
pub const OTHER: i32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            code: OTHER,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidInput(_) => USAGE,
            Error::Format(_) | Error::Json { .. } | Error::Shape(_) => DATA,
            Error::NonFinite(_) => NUMERICAL,
            Error::Io { .. } => OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
