use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] odelap::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    /// A result was produced but failed a validity check (written, flagged).
    #[error("{0}")]
    Validity(String),
    #[error("{0}")]
    Convergence(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 2 input, 3 numerical validity, 4 convergence or mixing.
    pub fn exit_code(&self) -> u8 {
        use odelap::Error as E;
        match self {
            CliError::Io { .. } | CliError::Input(_) => 2,
            CliError::Validity(_) => 3,
            CliError::Convergence(_) => 4,
            CliError::Core(e) => match e {
                E::Dimension(_) | E::Input(_) | E::Domain(_) => 2,
                E::NotConverged { .. } | E::Stalled { .. } | E::Mixing { .. } => 4,
                _ => 3,
            },
        }
    }
}
