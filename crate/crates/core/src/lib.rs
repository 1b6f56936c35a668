//! Self-supervised multispectral keypoint detection, description and
//! homography estimation.
//!
//! The pipeline has three stages: pseudo-ground-truth labeling of aligned
//! image pairs by multispectral homographic adaptation ([`adaptation`]),
//! joint training of a detector/descriptor/homography network
//! ([`network`], [`losses`], [`training`]), and inference with mutual
//! nearest-neighbour matching and robust fitting ([`matching`],
//! [`evaluation`]).

pub mod adaptation;
pub mod datahub;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod network;
pub mod raster;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{FourPointDelta, Homography, HomographySampleConfig};
pub use matching::{Keypoint, KeypointSet, MatchSet};
pub use raster::{Border, GrayImage, ImageDims};
