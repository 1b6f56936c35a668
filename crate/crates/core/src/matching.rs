//! Inference-stage matching: keypoint extraction, descriptor lookup,
//! mutual nearest neighbours and robust homography fitting.

use std::cmp::Ordering;

use nalgebra::Point2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dlt_homography, has_collinear_triple, weighted_dlt_homography, Homography};
use crate::raster::GrayImage;

/// A detected interest point. `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self { x, y, score }
    }

    pub fn point(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint> {
        self.points.iter()
    }

    pub fn positions(&self) -> Vec<Point2<f64>> {
        self.points.iter().map(Keypoint::point).collect()
    }
}

/// Score-descending order with `(row, col)` ascending tie-break.
pub(crate) fn score_order(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Greedy non-maximum suppression over a dense score grid.
///
/// Candidates are pixels with `score >= threshold` and `score > 0`, visited
/// in [`score_order`]; each kept pixel suppresses every later candidate within
/// Chebyshev distance `radius`. Returns `(row, col, score)` in visiting order.
pub fn greedy_nms(
    scores: &GrayImage,
    threshold: f64,
    radius: usize,
) -> Vec<(usize, usize, f64)> {
    let (w, h) = (scores.width(), scores.height());
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let s = scores.get(r, c);
            if s >= threshold && s > 0.0 {
                cands.push((s, r, c));
            }
        }
    }
    cands.sort_by(|a, b| score_order(*a, *b));
    if radius == 0 {
        return cands.into_iter().map(|(s, r, c)| (r, c, s)).collect();
    }
    let mut suppressed = vec![false; w * h];
    let mut kept = Vec::new();
    for (s, r, c) in cands {
        if suppressed[r * w + c] {
            continue;
        }
        kept.push((r, c, s));
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius).min(h - 1);
        let c0 = c.saturating_sub(radius);
        let c1 = (c + radius).min(w - 1);
        for rr in r0..=r1 {
            suppressed[rr * w + c0..=rr * w + c1].fill(true);
        }
    }
    kept
}

/// Threshold, suppress and truncate a keypoint heatmap.
pub fn extract_keypoints(
    heatmap: &GrayImage,
    det_threshold: f64,
    nms_radius: usize,
    max_points: usize,
) -> KeypointSet {
    let mut kept = greedy_nms(heatmap, det_threshold, nms_radius);
    kept.truncate(max_points);
    KeypointSet::new(
        kept.into_iter()
            .map(|(r, c, s)| Keypoint::new(c as f64, r as f64, s))
            .collect(),
    )
}

/// Per-pixel descriptor lookup used by [`sample_descriptors`].
pub trait DescriptorField {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn dim(&self) -> usize;
    /// Descriptor at integer pixel `(row, col)`.
    fn at(&self, row: usize, col: usize) -> Vec<f64>;
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Bilinear lookup of each keypoint in `field`, re-normalized to unit length.
pub fn sample_descriptors<F: DescriptorField + ?Sized>(field: &F, kps: &KeypointSet) -> Vec<Vec<f64>> {
    let (w, h) = (field.width(), field.height());
    kps.iter()
        .map(|kp| {
            let x = kp.x.clamp(0.0, (w - 1) as f64);
            let y = kp.y.clamp(0.0, (h - 1) as f64);
            let (c0, r0) = (x.floor() as usize, y.floor() as usize);
            let (fx, fy) = (x - c0 as f64, y - r0 as f64);
            let mut out = field.at(r0, c0);
            if fx > 0.0 || fy > 0.0 {
                let c1 = (c0 + 1).min(w - 1);
                let r1 = (r0 + 1).min(h - 1);
                let taps = [
                    ((1.0 - fx) * (1.0 - fy), r0, c0),
                    (fx * (1.0 - fy), r0, c1),
                    ((1.0 - fx) * fy, r1, c0),
                    (fx * fy, r1, c1),
                ];
                out.iter_mut().for_each(|v| *v = 0.0);
                for (wgt, r, c) in taps {
                    if wgt == 0.0 {
                        continue;
                    }
                    for (o, d) in out.iter_mut().zip(field.at(r, c)) {
                        *o += wgt * d;
                    }
                }
            }
            l2_normalize(&mut out);
            out
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inlier: Option<Vec<bool>>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Index of the smallest value, lowest index on ties.
fn argmin(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    values.enumerate().fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v >= bv => best,
        _ => Some((i, v)),
    })
}

/// Bidirectional nearest-neighbour matching on Euclidean descriptor distance.
pub fn mutual_nn_match(da: &[Vec<f64>], db: &[Vec<f64>]) -> MatchSet {
    if da.is_empty() || db.is_empty() {
        return MatchSet::default();
    }
    let dist: Vec<Vec<f64>> = da
        .iter()
        .map(|a| db.iter().map(|b| euclidean(a, b)).collect())
        .collect();
    let best_b: Vec<usize> = dist
        .iter()
        .map(|row| argmin(row.iter().copied()).expect("non-empty").0)
        .collect();
    let best_a: Vec<usize> = (0..db.len())
        .map(|j| argmin(dist.iter().map(|row| row[j])).expect("non-empty").0)
        .collect();
    let pairs = best_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_a[j] == i)
        .map(|(i, &j)| Match {
            index_a: i,
            index_b: j,
            distance: dist[i][j],
        })
        .collect();
    MatchSet {
        pairs,
        inlier: None,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Count correspondences within the reprojection threshold.
    #[default]
    InlierCount,
    /// Sum of `1 - (e / t)^2` over correspondences with error `e < t`.
    TruncatedQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustFitConfig {
    pub reproj_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_matches: usize,
    pub scoring: Scoring,
}

impl Default for RobustFitConfig {
    fn default() -> Self {
        Self {
            reproj_threshold: 2.0,
            max_iterations: 2000,
            confidence: 0.999,
            min_matches: 4,
            scoring: Scoring::InlierCount,
        }
    }
}

impl RobustFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reproj_threshold > 0.0) {
            return Err(Error::InvalidConfig("reproj_threshold must be positive".into()));
        }
        if self.min_matches < 4 {
            return Err(Error::InvalidConfig("min_matches must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.confidence) {
            return Err(Error::InvalidConfig("confidence must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustFit {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

impl RobustFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn reprojection_errors(h: &Homography, src: &[Point2<f64>], dst: &[Point2<f64>]) -> Vec<f64> {
    src.iter()
        .zip(dst)
        .map(|(p, q)| match h.apply(*p) {
            Some(m) => ((m.x - q.x).powi(2) + (m.y - q.y).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .collect()
}

fn score_model(errors: &[f64], cfg: &RobustFitConfig) -> (f64, usize) {
    let t = cfg.reproj_threshold;
    let inliers = errors.iter().filter(|&&e| e <= t).count();
    let score = match cfg.scoring {
        Scoring::InlierCount => inliers as f64,
        Scoring::TruncatedQuality => errors
            .iter()
            .filter(|&&e| e < t)
            .map(|e| 1.0 - (e / t).powi(2))
            .sum(),
    };
    (score, inliers)
}

/// Gaussian inlier likelihood of residual `e` averaged over noise scales up
/// to `threshold / 3.03` (the 99 % radius of 2-D Gaussian noise), zero past
/// the threshold.
fn marginal_weight(e: f64, threshold: f64) -> f64 {
    if !(e <= threshold) {
        return 0.0;
    }
    let sigma_max = threshold / 3.03;
    let k = 10;
    (1..=k)
        .map(|i| {
            let s = sigma_max * i as f64 / k as f64;
            (-0.5 * (e / s).powi(2)).exp()
        })
        .sum::<f64>()
        / k as f64
}

/// Hypothesize-and-verify homography fit from matched keypoints.
///
/// Minimal samples of 4 matches are solved with the normalized DLT; the best
/// model is refit on all of its inliers by least squares, and the refit is
/// repeated until the inlier set stops changing (at most 5 rounds).
pub fn robust_homography<R: Rng + ?Sized>(
    kpa: &KeypointSet,
    kpb: &KeypointSet,
    matches: &MatchSet,
    cfg: &RobustFitConfig,
    rng: &mut R,
) -> Result<RobustFit> {
    cfg.validate()?;
    let n = matches.len();
    if n < cfg.min_matches {
        return Err(Error::InsufficientMatches {
            found: n,
            required: cfg.min_matches,
        });
    }
    let src: Vec<Point2<f64>> = matches.pairs.iter().map(|m| kpa.points[m.index_a].point()).collect();
    let dst: Vec<Point2<f64>> = matches.pairs.iter().map(|m| kpb.points[m.index_b].point()).collect();

    let mut best: Option<(f64, usize, Homography)> = None;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        let idx = sample(rng, n, 4).into_vec();
        let s = [src[idx[0]], src[idx[1]], src[idx[2]], src[idx[3]]];
        let d = [dst[idx[0]], dst[idx[1]], dst[idx[2]], dst[idx[3]]];
        if has_collinear_triple(&s) || has_collinear_triple(&d) {
            continue;
        }
        let Ok(h) = dlt_homography(&s, &d) else {
            continue;
        };
        let errors = reprojection_errors(&h, &src, &dst);
        let (score, inliers) = score_model(&errors, cfg);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, inliers, h));
            let ratio = inliers as f64 / n as f64;
            needed = adaptive_iterations(ratio, cfg.confidence).max(iter);
        }
    }
    let (_, inliers, mut h) = best.ok_or(Error::NoConsensus)?;
    if inliers < 4 {
        return Err(Error::NoConsensus);
    }

    let mut mask: Vec<bool> = reprojection_errors(&h, &src, &dst)
        .iter()
        .map(|&e| e <= cfg.reproj_threshold)
        .collect();
    for _ in 0..5 {
        let (s, d): (Vec<_>, Vec<_>) = mask
            .iter()
            .zip(src.iter().zip(&dst))
            .filter(|(m, _)| **m)
            .map(|(_, (p, q))| (*p, *q))
            .unzip();
        let Ok(refit) = dlt_homography(&s, &d) else {
            break;
        };
        let new_mask: Vec<bool> = reprojection_errors(&refit, &src, &dst)
            .iter()
            .map(|&e| e <= cfg.reproj_threshold)
            .collect();
        if new_mask.iter().filter(|&&b| b).count() < mask.iter().filter(|&&b| b).count() {
            break;
        }
        h = refit;
        let done = new_mask == mask;
        mask = new_mask;
        if done {
            break;
        }
    }
    // Final polish with noise-marginalized weights: a correspondence that only
    // just clears the threshold contributes far less than a near-exact one.
    for _ in 0..3 {
        let weights: Vec<f64> = reprojection_errors(&h, &src, &dst)
            .iter()
            .map(|&e| marginal_weight(e, cfg.reproj_threshold))
            .collect();
        if weights.iter().filter(|&&w| w > 0.0).count() < 4 {
            break;
        }
        let Ok(refit) = weighted_dlt_homography(&src, &dst, &weights) else {
            break;
        };
        let new_mask: Vec<bool> = reprojection_errors(&refit, &src, &dst)
            .iter()
            .map(|&e| e <= cfg.reproj_threshold)
            .collect();
        if new_mask.iter().filter(|&&b| b).count() < mask.iter().filter(|&&b| b).count() {
            break;
        }
        h = refit;
        mask = new_mask;
    }
    if mask.iter().filter(|&&b| b).count() < 4 {
        return Err(Error::NoConsensus);
    }
    Ok(RobustFit {
        homography: h,
        inliers: mask,
    })
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if k.is_finite() {
        k.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}
