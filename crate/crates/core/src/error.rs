use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("tensor shape must have at least one axis and no zero extents, got {0:?}")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },

    #[error("unsupported image format for {0}")]
    UnsupportedFormat(PathBuf),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("keypoints line {line}: expected {expected} columns, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("keypoints line {line}: field {field:?} is not a number")]
    NonNumeric { line: usize, field: String },

    #[error("keypoints line {line}: {found} columns, expected 2, 4 or 6")]
    BadColumnCount { line: usize, found: usize },

    #[error("keypoint {index} lies outside the image extent {extent:?}")]
    KeypointOutOfExtent { index: usize, extent: Vec<usize> },

    #[error("guidance has zero dynamic range")]
    DegenerateGuidance,

    #[error("guidance value {0} outside [0, 1]")]
    GuidanceOutOfRange(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no grid cell carries a keypoint constraint")]
    NoConstraints,

    #[error("label {0} is absent from at least one mask")]
    LabelAbsent(u32),

    #[error("{0}")]
    ScaleMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
