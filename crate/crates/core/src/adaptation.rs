//! Multispectral homographic adaptation: pseudo-ground-truth keypoints that
//! are stable across random viewpoints and across the two spectra of an
//! aligned pair.
//!
//! Each trial warps both images by a random homography, binarizes the base
//! detector's response on each, keeps the detections of one spectrum that
//! have a detection of the other spectrum within a Chebyshev window, and
//! splats the surviving locations back into the reference frame. The
//! per-pixel acceptance counts are averaged over all trials and thresholded.

use nalgebra::Point2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_homography, warp_image, HomographySampleConfig, Homography};
use crate::matching::{greedy_nms, score_order, Keypoint, KeypointSet};
use crate::raster::{Border, GrayImage, ImageDims};

/// Dense per-pixel keypoint probability (or accumulated count) map.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointProbMap {
    probs: GrayImage,
}

impl KeypointProbMap {
    pub fn zeros(dims: ImageDims) -> Self {
        Self {
            probs: GrayImage::new(dims.width, dims.height),
        }
    }

    pub fn from_image(probs: GrayImage) -> Self {
        Self { probs }
    }

    pub fn dims(&self) -> ImageDims {
        self.probs.dims()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.probs.get(row, col)
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.probs.set(row, col, v)
    }

    pub fn as_image(&self) -> &GrayImage {
        &self.probs
    }

    pub fn into_image(self) -> GrayImage {
        self.probs
    }

    pub fn count_nonzero(&self) -> usize {
        self.probs.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// A keypoint detector whose per-pixel response lies in `[0, 1]`.
pub trait BaseDetector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, img: &GrayImage) -> Result<KeypointProbMap>;
}

/// Shi–Tomasi minimum-eigenvalue corner response, divided by its image maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiTomasiDetector {
    /// Gaussian integration scale of the structure tensor.
    pub sigma: f64,
    /// Pre-smoothing applied before differentiation.
    pub pre_sigma: f64,
}

impl Default for ShiTomasiDetector {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            pre_sigma: 0.7,
        }
    }
}

impl ShiTomasiDetector {
    pub fn response(&self, img: &GrayImage) -> GrayImage {
        let smooth = img.gaussian_blur(self.pre_sigma);
        let (gx, gy) = smooth.sobel();
        let (w, h) = (img.width(), img.height());
        let ixx = GrayImage::from_fn(w, h, |r, c| gx.get(r, c) * gx.get(r, c)).gaussian_blur(self.sigma);
        let iyy = GrayImage::from_fn(w, h, |r, c| gy.get(r, c) * gy.get(r, c)).gaussian_blur(self.sigma);
        let ixy = GrayImage::from_fn(w, h, |r, c| gx.get(r, c) * gy.get(r, c)).gaussian_blur(self.sigma);
        GrayImage::from_fn(w, h, |r, c| {
            let (a, b, d) = (ixx.get(r, c), ixy.get(r, c), iyy.get(r, c));
            let tr = 0.5 * (a + d);
            let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            (tr - disc).max(0.0)
        })
    }
}

impl BaseDetector for ShiTomasiDetector {
    fn name(&self) -> &str {
        "shi-tomasi"
    }

    fn detect(&self, img: &GrayImage) -> Result<KeypointProbMap> {
        if img.is_empty() {
            return Err(Error::ShapeMismatch("empty image".into()));
        }
        let resp = self.response(img);
        let max = resp.max_value();
        // flat images have no structure at all; relative noise is not a corner
        if !(max > 1e-10) {
            return Ok(KeypointProbMap::zeros(img.dims()));
        }
        Ok(KeypointProbMap::from_image(resp.map(|v| v / max)))
    }
}

/// How the two spectra are combined within a trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AcceptanceMode {
    /// Windowed cross-spectral acceptance accumulated as probabilities.
    Windowed,
    /// Elementwise product of Gaussian-smoothed detector responses.
    Gaussian { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub n_homographies: usize,
    /// Chebyshev radius; a window of size `2 r + 1`.
    pub window_radius: usize,
    /// Fraction of trials a pixel must be accepted in.
    pub accept_threshold: f64,
    pub det_threshold: f64,
    pub nms_radius: usize,
    pub sample_cfg: HomographySampleConfig,
    pub mode: AcceptanceMode,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            n_homographies: 100,
            window_radius: 2,
            accept_threshold: 0.3,
            det_threshold: 0.05,
            nms_radius: 4,
            sample_cfg: HomographySampleConfig::training(),
            mode: AcceptanceMode::Windowed,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_homographies == 0 {
            return Err(Error::InvalidConfig("n_homographies must be >= 1".into()));
        }
        if !(self.accept_threshold > 0.0 && self.accept_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "accept_threshold = {} not in (0, 1]",
                self.accept_threshold
            )));
        }
        if let AcceptanceMode::Gaussian { sigma } = self.mode {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidConfig("gaussian sigma must be >= 0".into()));
            }
        }
        self.sample_cfg.validate()
    }
}

/// Binarized detections: 1 where the detector response survives thresholding
/// and non-maximum suppression (`nms_radius == 0` disables suppression).
pub fn detect_binary(
    detector: &dyn BaseDetector,
    img: &GrayImage,
    det_threshold: f64,
    nms_radius: usize,
) -> Result<KeypointProbMap> {
    let scores = detector.detect(img)?;
    let mut out = KeypointProbMap::zeros(img.dims());
    for (r, c, _) in greedy_nms(scores.as_image(), det_threshold, nms_radius) {
        out.set(r, c, 1.0);
    }
    Ok(out)
}

/// Square max filter of Chebyshev radius `radius` on a binary map.
fn dilate(map: &KeypointProbMap, radius: usize) -> Vec<bool> {
    let ImageDims { width: w, height: h } = map.dims();
    let mut horiz = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) != 0.0 {
                let c0 = c.saturating_sub(radius);
                let c1 = (c + radius).min(w - 1);
                horiz[r * w + c0..=r * w + c1].fill(true);
            }
        }
    }
    let mut out = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            if horiz[r * w + c] {
                let r0 = r.saturating_sub(radius);
                let r1 = (r + radius).min(h - 1);
                for rr in r0..=r1 {
                    out[rr * w + c] = true;
                }
            }
        }
    }
    out
}

/// Keep each detection that has a detection of the other map within
/// Chebyshev distance `window_radius`.
pub fn windowed_accept(
    map_a: &KeypointProbMap,
    map_b: &KeypointProbMap,
    window_radius: usize,
) -> Result<(KeypointProbMap, KeypointProbMap)> {
    if map_a.dims() != map_b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            map_a.dims(),
            map_b.dims()
        )));
    }
    let near_b = dilate(map_b, window_radius);
    let near_a = dilate(map_a, window_radius);
    let keep = |map: &KeypointProbMap, near: &[bool]| {
        let img = map.as_image();
        let data = img
            .data()
            .iter()
            .zip(near)
            .map(|(&v, &n)| if v != 0.0 && n { 1.0 } else { 0.0 })
            .collect();
        KeypointProbMap::from_image(GrayImage::from_vec(img.width(), img.height(), data).expect("same dims"))
    };
    Ok((keep(map_a, &near_b), keep(map_b, &near_a)))
}

/// One trial's contribution in the reference frame.
fn windowed_trial(
    a: &GrayImage,
    b: &GrayImage,
    h: &Homography,
    detector: &dyn BaseDetector,
    cfg: &AdaptationConfig,
) -> Result<GrayImage> {
    let dims = a.dims();
    let wa = warp_image(a, h, Border::Reflect)?;
    let wb = warp_image(b, h, Border::Reflect)?;
    let da = detect_binary(detector, &wa, cfg.det_threshold, cfg.nms_radius)?;
    let db = detect_binary(detector, &wb, cfg.det_threshold, cfg.nms_radius)?;
    let (acc_a, acc_b) = windowed_accept(&da, &db, cfg.window_radius)?;
    let inv = h.inverse()?;
    let mut splat = GrayImage::new(dims.width, dims.height);
    for r in 0..dims.height {
        for c in 0..dims.width {
            if acc_a.get(r, c).max(acc_b.get(r, c)) == 0.0 {
                continue;
            }
            let Some(p) = inv.apply(Point2::new(c as f64, r as f64)) else {
                continue;
            };
            let (x, y) = (p.x.round(), p.y.round());
            if x >= 0.0 && y >= 0.0 && x < dims.width as f64 && y < dims.height as f64 {
                splat.set(y as usize, x as usize, 1.0);
            }
        }
    }
    Ok(splat)
}

fn gaussian_trial(
    a: &GrayImage,
    b: &GrayImage,
    h: &Homography,
    detector: &dyn BaseDetector,
    sigma: f64,
) -> Result<GrayImage> {
    let wa = warp_image(a, h, Border::Reflect)?;
    let wb = warp_image(b, h, Border::Reflect)?;
    let fa = detector.detect(&wa)?.into_image().gaussian_blur(sigma);
    let fb = detector.detect(&wb)?.into_image().gaussian_blur(sigma);
    let prod = GrayImage::from_vec(
        fa.width(),
        fa.height(),
        fa.data().iter().zip(fb.data()).map(|(x, y)| x * y).collect(),
    )?;
    warp_image(&prod, &h.inverse()?, Border::Zero)
}

/// Draw the trial homographies; the identity is always the first.
pub fn adaptation_homographies<R: Rng + ?Sized>(
    cfg: &AdaptationConfig,
    dims: ImageDims,
    rng: &mut R,
) -> Result<Vec<Homography>> {
    let mut hs = Vec::with_capacity(cfg.n_homographies);
    hs.push(Homography::identity());
    for _ in 1..cfg.n_homographies {
        hs.push(sample_homography(&cfg.sample_cfg, dims, rng)?);
    }
    Ok(hs)
}

/// Run homographic adaptation over an aligned pair and return the finalized
/// map: mean acceptance per pixel, zeroed below `accept_threshold`.
pub fn run_adaptation<R: Rng + ?Sized>(
    image_a: &GrayImage,
    image_b: &GrayImage,
    detector: &dyn BaseDetector,
    cfg: &AdaptationConfig,
    rng: &mut R,
) -> Result<KeypointProbMap> {
    cfg.validate()?;
    if image_a.dims() != image_b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "pair dims {:?} vs {:?}",
            image_a.dims(),
            image_b.dims()
        )));
    }
    let dims = image_a.dims();
    let homographies = adaptation_homographies(cfg, dims, rng)?;
    let trials: Vec<GrayImage> = homographies
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let res = match cfg.mode {
                AcceptanceMode::Windowed => windowed_trial(image_a, image_b, h, detector, cfg),
                AcceptanceMode::Gaussian { sigma } => gaussian_trial(image_a, image_b, h, detector, sigma),
            };
            res.unwrap_or_else(|e| {
                log::warn!("adaptation trial {i} failed: {e}; contributing zeros");
                GrayImage::new(dims.width, dims.height)
            })
        })
        .collect();

    let mut acc = GrayImage::new(dims.width, dims.height);
    for t in &trials {
        for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let n = cfg.n_homographies as f64;
    let thr = cfg.accept_threshold;
    Ok(KeypointProbMap::from_image(acc.map(|v| {
        let p = v / n;
        if p >= thr {
            p
        } else {
            0.0
        }
    })))
}

/// All nonzero pixels as keypoints, strongest first, ties by `(row, col)`.
pub fn finalize_keypoints(map: &KeypointProbMap, max_points: usize) -> KeypointSet {
    let ImageDims { width, height } = map.dims();
    let mut pts: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let v = map.get(r, c);
            if v != 0.0 {
                pts.push((v, r, c));
            }
        }
    }
    pts.sort_by(|a, b| score_order(*a, *b));
    pts.truncate(max_points);
    KeypointSet::new(
        pts.into_iter()
            .map(|(s, r, c)| Keypoint::new(c as f64, r as f64, s))
            .collect(),
    )
}
