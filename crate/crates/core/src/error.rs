use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {message}")]
    Format {
        what: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("volume data size mismatch: header declares {expected} voxels, file holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("volume value {value} at index {index} is not representable as int16 HU")]
    NotRepresentable { index: usize, value: f32 },

    #[error("volume header lacks a cranial-direction flag")]
    MissingCranialAxis,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label status {0} is not allowed here")]
    UnexpectedLabel(&'static str),

    #[error("no anchors selected for the loss (no positive and no negative labels)")]
    EmptySelection,

    #[error("candidate center {center:?} lies outside volume of dims {dims:?}")]
    CenterOutsideVolume { center: [f64; 3], dims: [usize; 3] },

    #[error("could not place {requested} non-overlapping aneurysms after {attempts} attempts")]
    PlacementFailed { requested: usize, attempts: usize },

    #[error("evaluation undefined: {0}")]
    Undefined(String),

    #[error("lesion is missing stratification label `{0}`")]
    MissingLabel(String),

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
