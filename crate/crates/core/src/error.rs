use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("mask is not binary: found value {value} at voxel {index}")]
    InvalidMask { value: f64, index: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("displacement direction is undefined: centroid coincides with the volume center")]
    DegenerateDirection,

    #[error("no prediction for case {case_id} ({timepoint}) at {path}")]
    MissingPrediction {
        case_id: String,
        timepoint: String,
        path: PathBuf,
    },

    #[error("could not place lesion {lesion} in case {case_id} after {attempts} attempts")]
    Placement {
        case_id: String,
        lesion: usize,
        attempts: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dice is undefined when both masks are empty")]
    UndefinedDice,

    #[error("signed-rank test is degenerate: every paired difference is zero")]
    DegenerateTest,

    #[error(
        "requested top {requested} lesions but only {available} correct lesions with dice exist"
    )]
    TopKUnsatisfiable { requested: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems map to exit code 2, data problems to 3.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
