use std::fmt;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// Missing, corrupt or incompatible artifact: exit 3.
    Artifact(String),
    /// Numeric or runtime failure: exit 4.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Artifact(m) => write!(f, "artifact error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<poss_core::Error> for CliError {
    fn from(e: poss_core::Error) -> Self {
        use poss_core::Error as E;
        let m = e.to_string();
        match e {
            E::Config(_) => CliError::Usage(m),
            E::BadMagic { .. }
            | E::VersionMismatch { .. }
            | E::TruncatedRecord { .. }
            | E::Format(_)
            | E::Io(_)
            | E::Json(_) => CliError::Artifact(m),
            E::Dimension { .. } | E::Numeric(_) | E::Contract(_) | E::Capacity { .. } | E::Measurement(_) => {
                CliError::Runtime(m)
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}
