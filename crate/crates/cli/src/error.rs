use std::fmt;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// A required artifact is absent or incomplete; exit code 3.
    Missing(String),
    /// Training or analysis failed; exit code 4.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Runtime(_) => 4,
        })
    }

    pub fn io(what: &str, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{what}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(m) => write!(f, "missing artifact: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<xder::Error> for CliError {
    fn from(e: xder::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
