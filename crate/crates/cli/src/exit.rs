//! Process exit codes.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    /// Training diverged or another internal failure.
    Failure = 1,
    /// Bad flags, config, or input values.
    Input = 2,
    /// A required dataset or checkpoint is missing.
    Prerequisite = 3,
    /// Artifacts that do not fit together.
    Incompatible = 4,
    /// Unreadable, unwritable, or corrupt files.
    Io = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<omr_core::Error> for CliError {
    fn from(e: omr_core::Error) -> Self {
        use omr_core::Error as E;
        let code = match &e {
            E::Dimension { .. } | E::Incompatible(_) => Code::Incompatible,
            E::Config(_) | E::Input(_) | E::Usage(_) => Code::Input,
            E::Io { .. } | E::Json { .. } | E::HashMismatch { .. } | E::Format(_) => Code::Io,
            _ => Code::Failure,
        };
        CliError::new(code, e.to_string())
    }
}
