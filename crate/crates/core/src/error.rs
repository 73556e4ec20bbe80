use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading an svol file.
#[derive(Debug, Error)]
pub enum SvolError {
    #[error("missing or wrong magic bytes (expected \"SVOL1\\n\")")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("unknown semantics {0:?}")]
    UnknownSemantics(String),
    #[error("payload mismatch: header declares {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Svol {
        path: PathBuf,
        #[source]
        source: SvolError,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("label {label} at voxel {voxel:?} is out of range for {semantics} (max {max})")]
    LabelOutOfRange {
        label: u8,
        voxel: [usize; 3],
        semantics: &'static str,
        max: u8,
    },
    #[error("probabilities at voxel {0:?} are not normalized")]
    NotNormalized([usize; 3]),
    #[error("hierarchy violation at voxel {voxel:?}: {reason}")]
    Consistency { voxel: [usize; 3], reason: String },
    #[error("region partition has no bronchovascular voxels")]
    EmptyBv,
    #[error("structure ground truth has no labeled voxels")]
    EmptyStructure,
    #[error("lobe {0} contains no bronchovascular voxel of any member segment")]
    LobeWithoutStructure(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("non-finite loss or gradient at iteration {0}")]
    NumericalAbort(usize),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
