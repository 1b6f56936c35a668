//! Shared fixtures for the pipeline benchmarks.

use msmatch_core::datahub::{synth_pair, AlignedPair, SynthStyle};
use msmatch_core::geometry::warp_points;
use msmatch_core::matching::Match;
use msmatch_core::{Homography, ImageDims, Keypoint, KeypointSet, MatchSet};

pub fn scene(side: usize) -> AlignedPair {
    synth_pair(7, ImageDims::new(side, side), &SynthStyle::default()).expect("valid dims")
}

/// `n` matches on a grid, the first `inliers` consistent with `h` and the
/// rest displaced by a deterministic scramble.
pub fn correspondences(h: &Homography, n: usize, inliers: usize) -> (KeypointSet, KeypointSet, MatchSet) {
    let pts: Vec<_> = (0..n)
        .map(|i| nalgebra::Point2::new((i * 37 % 120) as f64 + 4.0, (i * 53 % 120) as f64 + 4.0))
        .collect();
    let mut dst = warp_points(&pts, h).expect("finite");
    for (i, p) in dst.iter_mut().enumerate().skip(inliers) {
        p.x = (i * 71 % 128) as f64;
        p.y = (i * 29 % 128) as f64;
    }
    let a = KeypointSet::new(pts.iter().map(|p| Keypoint::new(p.x, p.y, 1.0)).collect());
    let b = KeypointSet::new(dst.iter().map(|p| Keypoint::new(p.x, p.y, 1.0)).collect());
    let m = MatchSet {
        pairs: (0..n).map(|i| Match { index_a: i, index_b: i, distance: 0.0 }).collect(),
        inlier: None,
    };
    (a, b, m)
}
