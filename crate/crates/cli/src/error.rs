use std::path::PathBuf;

use amcbf::envs::EnvError;
use amcbf::rl::RlError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("could not load {}: {message}", path.display())]
    Load { path: PathBuf, message: String },
    #[error("{path}: {source}", path = path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric abort: {message}; diagnostics written to {}", dump.display())]
    NumericAbort { message: String, dump: PathBuf },
    #[error("{0}")]
    Numeric(String),
    #[error("{0} of {1} properties failed")]
    PropertyFailure(usize, usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Load { .. } => 2,
            CliError::NumericAbort { .. } | CliError::Numeric(_) => 3,
            CliError::PropertyFailure(..) => 4,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::UnknownScenario(_) | EnvError::Config(_) | EnvError::Sampling => CliError::Usage(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Config(m) => CliError::Usage(m),
            RlError::Env(e) => e.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
