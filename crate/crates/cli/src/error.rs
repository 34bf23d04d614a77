use thiserror::Error;

/// Command failures, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    /// 1 usage or config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<mfviflow::Error> for CliError {
    fn from(e: mfviflow::Error) -> Self {
        use mfviflow::Error as E;
        match e {
            E::Usage(_) | E::Dimension { .. } => CliError::Usage(e.to_string()),
            E::Domain { .. } | E::NonFinite { .. } | E::Numerical(_) => CliError::Numerical(e.to_string()),
            E::Checkpoint { .. } | E::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}
