use std::fmt;
use std::process::ExitCode;

/// A failed command, classified by exit status.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and did not pass.
    Failed(String),
    Usage(String),
    Config(String),
    Io(String),
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Contract(_) => 5,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "check failed: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Contract(m) => write!(f, "{m}"),
        }
    }
}

impl From<csca::Error> for CliError {
    fn from(e: csca::Error) -> Self {
        use csca::Error as E;
        match e {
            E::Contract(_) => CliError::Contract(e.to_string()),
            E::ConfigMismatch(_) => CliError::Config(e.to_string()),
            E::BadMagic { .. } | E::Truncated(_) | E::Format(_) | E::Io(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
