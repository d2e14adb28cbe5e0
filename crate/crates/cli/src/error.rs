use std::fmt;

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or incompatible inputs (exit 2).
    Config(String),
    /// Training divergence or a non-finite filter step (exit 3).
    Numeric(String),
    /// Unreadable, unwritable or corrupt files (exit 4).
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Prefixes the message, e.g. with the method that failed.
    pub fn context(self, label: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{label}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{label}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{label}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fbf_core::Error> for CliError {
    fn from(e: fbf_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub(crate) fn io_at(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}
