use std::fmt;

/// Failure of a CLI run, grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// The numerical pipeline gave up (exit 3).
    Numerical(String),
    /// Missing, unreadable or corrupt files (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<orbit_core::Error> for CliError {
    fn from(e: orbit_core::Error) -> Self {
        use orbit_core::Error as E;
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            E::Io(_) | E::BadMagic | E::Truncated(_) | E::NonFinite(_) | E::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
