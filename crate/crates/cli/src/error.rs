use std::fmt;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2: bad configuration or arguments.
    Config(String),
    /// Exit code 3: the computation itself failed (including NaN aborts).
    Runtime(String),
    /// Exit code 4: reading or writing files.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<negcut::Error> for CliError {
    fn from(e: negcut::Error) -> Self {
        use negcut::Error as E;
        match e {
            E::InvalidInput(_) | E::Config(_) => CliError::Config(e.to_string()),
            E::Io { .. } | E::Image { .. } | E::Json(_) | E::Safetensors(_) => CliError::Io(e.to_string()),
            E::Degenerate(_) | E::Numerical(_) | E::NonFinite { .. } | E::Invariant(_) | E::Tensor(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
