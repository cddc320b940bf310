use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;

pub type Result<T, E = NormlabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NormlabError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}, update {update}: {reason}")]
    Divergence { epoch: usize, update: u64, reason: String },

    #[error(transparent)]
    Core(#[from] normlab_core::Error),
}

impl NormlabError {
    /// Process exit status: 1 configuration, 2 data or output files,
    /// 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(_) => 1,
            Self::Data(_) | Self::Output { .. } | Self::Parse { .. } => 2,
            Self::Divergence { .. } => 3,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: impl Into<std::io::Error>) -> Self {
        Self::Output {
            path: path.into(),
            source: source.into(),
        }
    }
}
