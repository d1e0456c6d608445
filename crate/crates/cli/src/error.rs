use erkg::KgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input files.
    #[error("{0}")]
    Usage(String),
    /// A verification ran but missed its tolerance.
    #[error("{0}")]
    Tolerance(String),
    /// Training or evaluation produced a non-finite value.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<KgError> for CliError {
    fn from(e: KgError) -> Self {
        match e {
            KgError::NonFinite(_) => CliError::Numeric(e.to_string()),
            KgError::Infeasible(_) => CliError::Tolerance(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
