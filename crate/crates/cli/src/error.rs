use std::path::PathBuf;

use dlqr_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_STABILITY: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                CoreError::Instance(_) | CoreError::NotPositiveDefinite { .. } | CoreError::EmptyDistribution => {
                    EXIT_CONFIG
                }
                CoreError::NonConvergence { .. } => EXIT_SOLVER,
                CoreError::UnstableGain(_) | CoreError::StabilityBoundary { .. } | CoreError::Hypothesis(_) => {
                    EXIT_STABILITY
                }
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
