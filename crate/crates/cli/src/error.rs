use std::fmt;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration, flags or input files (exit 2).
    Config(String),
    /// Divergence or non-finite values during a run (exit 3).
    Numerical(String),
    /// Reproduction finished but missed an acceptance tolerance (exit 4).
    Acceptance(String),
    /// Reading or writing files failed (exit 1).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Acceptance(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Acceptance(m) => write!(f, "acceptance failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<scoregen::Error> for CliError {
    fn from(e: scoregen::Error) -> Self {
        match e {
            scoregen::Error::Numerical(_) => CliError::Numerical(e.to_string()),
            scoregen::Error::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
