use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sampler diverged at step {step}: non-finite latent entry")]
    Divergence { step: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDivergence { epoch: usize },

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum failure in record {record}")]
    Checksum { record: usize },

    #[error("layout hash mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    LayoutMismatch { checkpoint: String, dataset: String },

    #[error("sequence id mismatch: {0}")]
    IdMismatch(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
