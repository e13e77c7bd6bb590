use std::fmt;

/// Failure of a command, classified for the exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Run(dexrefine::Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Run(e) if e.is_numerical() => 3,
            CliError::Run(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<dexrefine::Error> for CliError {
    fn from(e: dexrefine::Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
