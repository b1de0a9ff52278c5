use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{location}: {message}")]
    Format { location: String, message: String },
    #[error("non-finite loss during {stage} at step {step}")]
    NonFiniteLoss { stage: &'static str, step: usize },
    #[error("no latent vector for sample(s) {}", .0.join(", "))]
    MissingLatent(Vec<String>),
    #[error("missing samples {}", .0.join(", "))]
    MissingSamples(Vec<String>),
    #[error("missing artifact {}; run the producing command first", .0.display())]
    MissingArtifact(PathBuf),
    #[error("augmentation failed on sample {sample_id}: {source}")]
    PolicyFailure {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("statistical precondition violated: {0}")]
    StatsPrecondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Maps a missing file to [`Error::MissingArtifact`], other failures to [`Error::Io`].
pub(crate) fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
