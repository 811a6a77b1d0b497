//! Pipeline commands and the read-only search service behind the `mrfibp`
//! binary. Every command returns a [`CliError`] carrying a short code that the
//! binary prints on one line.

pub mod commands;
pub mod server;

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("E_USAGE", message)
    }

    /// `error[CODE]: message` with newlines folded so it stays on one line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.code, self.message.replace('\n', " "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<mrfibp::Error> for CliError {
    fn from(e: mrfibp::Error) -> Self {
        let message = match &e {
            mrfibp::Error::UnknownFactor { name, suggestions } => {
                format!("unknown factor '{name}'; did you mean: {}", suggestions.join(", "))
            }
            other => other.to_string(),
        };
        CliError::new(e.code(), message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("E_IO", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("E_JSON", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("E_PARSE", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
