use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Solver, validation or verification failure; exit status 1.
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl From<ethena_ctl::Error> for CliError {
    fn from(err: ethena_ctl::Error) -> Self {
        use ethena_ctl::Error as E;
        match err {
            E::MissingField(_) | E::InvalidInput(_) => CliError::Usage(err.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Usage(format!("output: {err}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Usage(format!("output: {err}"))
    }
}
