use std::path::PathBuf;

/// Errors produced by the matching pipeline.
///
/// Variants carry the stable error kinds used across modules so that the CLI
/// can map them onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate-homography: {0}")]
    DegenerateHomography(String),
    #[error("point-at-infinity: point {index} maps to infinity")]
    PointAtInfinity { index: usize },
    #[error("degenerate-correspondences: {0}")]
    DegenerateCorrespondences(String),
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad-input-dims: {height}x{width} is not a multiple of 8")]
    BadInputDims { height: usize, width: usize },
    #[error("keypoint-out-of-bounds: ({x}, {y}) outside {width}x{height}")]
    KeypointOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("nan-loss: term {term} is not finite")]
    NanLoss { term: &'static str },
    #[error("insufficient-matches: {found} < {required}")]
    InsufficientMatches { found: usize, required: usize },
    #[error("no-consensus: no model reached 4 inliers")]
    NoConsensus,
    #[error("unpaired-image: {0}")]
    UnpairedImage(String),
    #[error("image-too-small: {height}x{width} smaller than crop {crop}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        crop: usize,
    },
    #[error("bad-label-file: {path}: {reason}")]
    BadLabelFile { path: PathBuf, reason: String },
    #[error("bad-checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error("image decode error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
