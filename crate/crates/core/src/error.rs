use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the curb pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    BinaryParse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}:{line}: parse error: {message}")]
    TextParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {key} not found")]
    MissingKey { path: PathBuf, key: String },

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("degenerate segment: {0} points, need at least 3")]
    DegenerateSegment(usize),

    #[error("horizontal ring: vertical angle {0:.3e} rad")]
    HorizontalRing(f64),

    #[error("GPR factorization failed after {0} noise escalations")]
    GprFactorization(usize),

    #[error("collinear correspondences")]
    CollinearCorrespondences,

    #[error("camera is parallel to the ground plane")]
    DegenerateGroundPlane,

    #[error("underdetermined: {0} distinct rows, need at least 3")]
    Underdetermined(usize),

    #[error("identity branch illegal: {0}")]
    IdentityBranchIllegal(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: image error: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: json error: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
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
