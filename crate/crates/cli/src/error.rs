use std::fmt;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Invalid flags, config or module preconditions.
    Usage(String),
    /// The command ran but could not complete.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Failure(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Tags a core error as a usage or a runtime problem.
pub trait Classify<T> {
    fn usage(self) -> Result<T, CliError>;
    fn failure(self) -> Result<T, CliError>;
}

impl<T> Classify<T> for isdet_core::Result<T> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(e.to_string()))
    }

    fn failure(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Failure(e.to_string()))
    }
}
