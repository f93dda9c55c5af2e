use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration. Exit code 1.
    Usage(String),
    /// Unreadable or invalid input data. Exit code 2.
    Data(String),
    /// Failure while running. Exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<marseg::Error> for CliError {
    fn from(e: marseg::Error) -> Self {
        use marseg::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Usage(msg),
            E::Load { .. }
            | E::Image { .. }
            | E::Schema { .. }
            | E::Data(_)
            | E::Shape(_)
            | E::Spec(_)
            | E::Serde(_) => CliError::Data(msg),
            E::Io { .. } | E::Stream(_) | E::NonFiniteLoss { .. } => CliError::Runtime(msg),
        }
    }
}
