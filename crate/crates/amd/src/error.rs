use std::io;
use std::path::PathBuf;

/// Failures of the harness, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: amd_core::Error,
    },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA_FORMAT: i32 = 3;
    pub const TRAINING: i32 = 4;
    pub const SELECTION: i32 = 5;
    pub const IO: i32 = 6;
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use amd_core::Error as E;
        match self {
            HarnessError::Config(_) => exit::CONFIG,
            HarnessError::Format(_) | HarnessError::Corrupt(_) => exit::DATA_FORMAT,
            HarnessError::Io { .. } => exit::IO,
            HarnessError::Stage { source, .. } => match source {
                E::Domain(_) | E::Contract(_) | E::Pruning(_) => exit::CONFIG,
                E::Data(_) => exit::DATA_FORMAT,
                E::Training(_) => exit::TRAINING,
                E::Selection(_) => exit::SELECTION,
                E::Dimension { .. } | E::State(_) | E::MaskInvariant(_) => exit::INTERNAL,
            },
        }
    }
}

/// Attaches a stage label to core errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for amd_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| HarnessError::Stage { stage, source })
    }
}
