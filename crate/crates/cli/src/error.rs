use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(cvdiff::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<cvdiff::Error> for CliError {
    fn from(e: cvdiff::Error) -> Self {
        match e {
            e if e.is_numerical() => CliError::Numerical(e),
            cvdiff::Error::Io(io) => CliError::Io(io),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl CliError {
    /// 2 for configuration errors, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}
