use std::path::{Path, PathBuf};

use avm_core::avmd::AvmdError;
use avm_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 1 internal failure, 2 configuration, 3 I/O or unreadable
    /// container, 4 numerical divergence, 5 invariant breach.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Contract(_) => 2,
                CoreError::Io { .. } | CoreError::Container(_) => 3,
                CoreError::Divergence { .. } => 4,
                CoreError::InvariantBreach(_) => 5,
                CoreError::Autodiff(_) => 1,
            },
        }
    }
}

impl From<AvmdError> for CliError {
    fn from(e: AvmdError) -> Self {
        CliError::Core(CoreError::Container(e))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
