//! Warped-pair evaluation: repeatability, matching score and homography
//! corner accuracy.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{AlignedPair, Spectrum};
use crate::error::{Error, Result};
use crate::geometry::{image_corners, sample_homography, warp_image, Homography, HomographySampleConfig};
use crate::matching::{
    extract_keypoints, mutual_nn_match, robust_homography, sample_descriptors, KeypointSet, MatchSet,
    RobustFitConfig,
};
use crate::network::{densify_descriptors, logits_to_heatmap, Model, CELL};
use crate::raster::{Border, GrayImage, ImageDims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pixel_tolerance: f64,
    pub epsilons: Vec<f64>,
    pub warp: HomographySampleConfig,
    pub seed: u64,
    pub robust: RobustFitConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pixel_tolerance: 5.0,
            epsilons: (1..=10).map(f64::from).collect(),
            warp: HomographySampleConfig::evaluation(),
            seed: 0,
            robust: RobustFitConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_tolerance > 0.0) {
            return Err(Error::InvalidConfig("pixel_tolerance must be positive".into()));
        }
        if self.epsilons.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig("epsilons must be sorted ascending".into()));
        }
        self.warp.validate()?;
        self.robust.validate()
    }
}

/// Ground-truth warp for one evaluation pair: the `fixed` spectrum image is
/// kept and the other spectrum's image is warped by `h_gt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalWarp {
    pub pair_id: String,
    pub fixed: Spectrum,
    pub h_gt: Homography,
}

/// Network input size for an image: padded up to a multiple of the cell size.
pub fn eval_dims(dims: ImageDims) -> ImageDims {
    ImageDims::new(dims.width.div_ceil(CELL) * CELL, dims.height.div_ceil(CELL) * CELL)
}

pub fn make_eval_warps(pairs: &[AlignedPair], cfg: &EvalConfig) -> Result<Vec<EvalWarp>> {
    cfg.warp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pairs
        .iter()
        .map(|p| {
            let fixed = if rng.random::<bool>() { Spectrum::A } else { Spectrum::B };
            let h_gt = sample_homography(&cfg.warp, eval_dims(p.dims()), &mut rng)?;
            Ok(EvalWarp {
                pair_id: p.id.clone(),
                fixed,
                h_gt,
            })
        })
        .collect()
}

/// Keypoints whose own location lies in the frame and whose image under `h`
/// also lies in the frame, paired with the mapped location.
fn overlap(kps: &KeypointSet, h: &Homography, dims: ImageDims) -> Vec<(Point2<f64>, Point2<f64>)> {
    kps.iter()
        .filter(|k| dims.contains(k.x, k.y))
        .filter_map(|k| {
            let p = k.point();
            h.apply(p).filter(|q| dims.contains(q.x, q.y)).map(|q| (p, q))
        })
        .collect()
}

fn dist(a: Point2<f64>, b: Point2<f64>) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Symmetric repeatability of two keypoint sets related by `h` (image one to
/// image two), restricted to the shared view.
pub fn repeatability(kp1: &KeypointSet, kp2: &KeypointSet, h: &Homography, dims: ImageDims, tol: f64) -> Result<f64> {
    let inv = h.inverse()?;
    let a = overlap(kp1, h, dims);
    let b = overlap(kp2, &inv, dims);
    if a.is_empty() && b.is_empty() {
        return Ok(0.0);
    }
    let rep_a = a
        .iter()
        .filter(|(_, q)| b.iter().any(|(p2, _)| dist(*q, *p2) <= tol))
        .count();
    let rep_b = b
        .iter()
        .filter(|(_, q)| a.iter().any(|(p1, _)| dist(*q, *p1) <= tol))
        .count();
    Ok((rep_a + rep_b) as f64 / (a.len() + b.len()) as f64)
}

/// Fraction of keypoints in the shared view that are correctly matched,
/// averaged over both images.
pub fn matching_score(
    matches: &MatchSet,
    kp1: &KeypointSet,
    kp2: &KeypointSet,
    h: &Homography,
    dims: ImageDims,
    tol: f64,
) -> Result<f64> {
    let inv = h.inverse()?;
    let n1 = overlap(kp1, h, dims).len();
    let n2 = overlap(kp2, &inv, dims).len();
    let correct = matches
        .pairs
        .iter()
        .filter(|m| {
            let p1 = kp1.points[m.index_a];
            let p2 = kp2.points[m.index_b];
            let in1 = dims.contains(p1.x, p1.y)
                && h.apply(p1.point()).is_some_and(|q| dims.contains(q.x, q.y));
            let in2 = dims.contains(p2.x, p2.y)
                && inv.apply(p2.point()).is_some_and(|q| dims.contains(q.x, q.y));
            in1 && in2 && h.apply(p1.point()).is_some_and(|q| dist(q, p2.point()) <= tol)
        })
        .count() as f64;
    let ratio = |n: usize| if n == 0 { 0.0 } else { correct / n as f64 };
    Ok(0.5 * (ratio(n1) + ratio(n2)))
}

/// Distances between the image corners mapped by `h_est` and by `h_gt`;
/// infinite where either mapping fails.
pub fn corner_errors(h_est: &Homography, h_gt: &Homography, dims: ImageDims) -> [f64; 4] {
    let corners = image_corners(dims);
    let mut out = [f64::INFINITY; 4];
    for (o, c) in out.iter_mut().zip(corners) {
        if let (Some(a), Some(b)) = (h_est.apply(c), h_gt.apply(c)) {
            *o = dist(a, b);
        }
    }
    out
}

/// Fraction of the four corners within each threshold.
pub fn corner_accuracy(h_est: &Homography, h_gt: &Homography, dims: ImageDims, epsilons: &[f64]) -> Vec<f64> {
    accuracy_from_errors(&corner_errors(h_est, h_gt, dims), epsilons)
}

fn accuracy_from_errors(errors: &[f64; 4], epsilons: &[f64]) -> Vec<f64> {
    epsilons
        .iter()
        .map(|&e| errors.iter().filter(|&&d| d <= e).count() as f64 / 4.0)
        .collect()
}

/// Keypoints with one descriptor each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub keypoints: KeypointSet,
    pub descriptors: Vec<Vec<f64>>,
}

/// Anything that turns an image into keypoints and descriptors.
pub trait FeatureExtractor: Sync {
    fn extract(&self, img: &GrayImage) -> Result<Features>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub det_threshold: f64,
    pub nms_radius: usize,
    pub max_keypoints: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            det_threshold: 0.015,
            nms_radius: 4,
            max_keypoints: 1000,
        }
    }
}

/// Trained network inference: heatmap, keypoint extraction and dense
/// descriptor lookup. Images are padded by reflection to a multiple of 8;
/// keypoints in the padding are discarded.
pub struct ModelExtractor<'a> {
    pub model: &'a Model,
    pub detect: DetectConfig,
}

impl FeatureExtractor for ModelExtractor<'_> {
    fn extract(&self, img: &GrayImage) -> Result<Features> {
        let dims = img.dims();
        let padded = img.pad_to_multiple(CELL);
        let (logits, grid) = self.model.infer(&padded)?;
        let mut heat = logits_to_heatmap(&logits);
        if padded.dims() != dims {
            heat = heat.crop(0, 0, dims.width, dims.height)?;
        }
        let kps = extract_keypoints(&heat, self.detect.det_threshold, self.detect.nms_radius, self.detect.max_keypoints);
        let descriptors = sample_descriptors(&densify_descriptors(&grid), &kps);
        Ok(Features {
            keypoints: kps,
            descriptors,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub fixed: Spectrum,
    pub keypoints_fixed: usize,
    pub keypoints_warped: usize,
    pub matches: usize,
    pub inliers: usize,
    pub repeatability: f64,
    pub matching_score: f64,
    /// `None` where a corner could not be estimated.
    pub corner_errors: [Option<f64>; 4],
    pub corner_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repeatability: f64,
    pub matching_score: f64,
    pub corner_accuracy: Vec<f64>,
    pub mean_keypoints: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pixel_tolerance: f64,
    pub epsilons: Vec<f64>,
    pub pairs: Vec<PairRecord>,
    pub aggregate: Aggregate,
    /// Wall time per pair in milliseconds; kept out of the serialized report
    /// so reports are reproducible.
    #[serde(skip)]
    pub runtime_ms: Vec<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn aggregate(pairs: &[PairRecord], n_eps: usize) -> Aggregate {
    Aggregate {
        repeatability: mean(pairs.iter().map(|p| p.repeatability)),
        matching_score: mean(pairs.iter().map(|p| p.matching_score)),
        corner_accuracy: (0..n_eps)
            .map(|i| mean(pairs.iter().map(|p| p.corner_accuracy[i])))
            .collect(),
        mean_keypoints: mean(
            pairs
                .iter()
                .map(|p| 0.5 * (p.keypoints_fixed + p.keypoints_warped) as f64),
        ),
    }
}

/// Evaluate one warped pair.
pub fn evaluate_pair<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    pair: &AlignedPair,
    warp: &EvalWarp,
    cfg: &EvalConfig,
    fit_seed: u64,
) -> Result<PairRecord> {
    let fixed = pair.image(warp.fixed).pad_to_multiple(CELL);
    let moving = pair.image(warp.fixed.other()).pad_to_multiple(CELL);
    let dims = fixed.dims();
    let warped = warp_image(&moving, &warp.h_gt, Border::Reflect)?;
    let f1 = extractor.extract(&fixed)?;
    let f2 = extractor.extract(&warped)?;
    let mut matches = mutual_nn_match(&f1.descriptors, &f2.descriptors);
    let mut rng = ChaCha8Rng::seed_from_u64(fit_seed);
    let errors = match robust_homography(&f1.keypoints, &f2.keypoints, &matches, &cfg.robust, &mut rng) {
        Ok(fit) => {
            matches.inlier = Some(fit.inliers.clone());
            corner_errors(&fit.homography, &warp.h_gt, dims)
        }
        Err(Error::InsufficientMatches { .. } | Error::NoConsensus) => {
            log::debug!("pair {}: robust fit failed", pair.id);
            [f64::INFINITY; 4]
        }
        Err(e) => return Err(e),
    };
    let tol = cfg.pixel_tolerance;
    Ok(PairRecord {
        pair_id: pair.id.clone(),
        fixed: warp.fixed,
        keypoints_fixed: f1.keypoints.len(),
        keypoints_warped: f2.keypoints.len(),
        matches: matches.len(),
        inliers: matches
            .inlier
            .as_ref()
            .map_or(0, |v| v.iter().filter(|&&b| b).count()),
        repeatability: repeatability(&f1.keypoints, &f2.keypoints, &warp.h_gt, dims, tol)?,
        matching_score: matching_score(&matches, &f1.keypoints, &f2.keypoints, &warp.h_gt, dims, tol)?,
        corner_errors: errors.map(|e| e.is_finite().then_some(e)),
        corner_accuracy: accuracy_from_errors(&errors, &cfg.epsilons),
    })
}

/// Full protocol over `pairs`; per-pair work runs in parallel and results
/// are kept in input order.
pub fn run_protocol<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    pairs: &[AlignedPair],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let warps = make_eval_warps(pairs, cfg)?;
    let results: Vec<(PairRecord, f64)> = pairs
        .par_iter()
        .zip(&warps)
        .enumerate()
        .map(|(i, (pair, warp))| {
            let start = Instant::now();
            let rec = evaluate_pair(extractor, pair, warp, cfg, cfg.seed.wrapping_add(i as u64 + 1))?;
            Ok((rec, start.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;
    let (records, runtime_ms): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(EvalReport {
        pixel_tolerance: cfg.pixel_tolerance,
        epsilons: cfg.epsilons.clone(),
        aggregate: aggregate(&records, cfg.epsilons.len()),
        pairs: records,
        runtime_ms,
    })
}

impl EvalReport {
    /// Write `report.json`, `pairs.csv`, `corner_accuracy.csv` and the
    /// separate `timings.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;

        let mut csv = String::from("pair_id,fixed,keypoints_fixed,keypoints_warped,matches,inliers,repeatability,matching_score,mean_corner_error");
        for e in &self.epsilons {
            csv.push_str(&format!(",acc_eps_{e}"));
        }
        csv.push('\n');
        for p in &self.pairs {
            let mean_err = if p.corner_errors.iter().all(Option::is_some) {
                format!("{}", mean(p.corner_errors.iter().flatten().copied()))
            } else {
                "inf".to_string()
            };
            let fixed = match p.fixed {
                Spectrum::A => "a",
                Spectrum::B => "b",
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                p.pair_id,
                fixed,
                p.keypoints_fixed,
                p.keypoints_warped,
                p.matches,
                p.inliers,
                p.repeatability,
                p.matching_score,
                mean_err
            ));
            for a in &p.corner_accuracy {
                csv.push_str(&format!(",{a}"));
            }
            csv.push('\n');
        }
        fs::write(dir.join("pairs.csv"), csv)?;

        let mut curve = String::from("epsilon,corner_accuracy\n");
        for (e, a) in self.epsilons.iter().zip(&self.aggregate.corner_accuracy) {
            curve.push_str(&format!("{e},{a}\n"));
        }
        fs::write(dir.join("corner_accuracy.csv"), curve)?;

        let timings: Vec<_> = self
            .pairs
            .iter()
            .zip(&self.runtime_ms)
            .map(|(p, t)| serde_json::json!({"pair_id": p.pair_id, "runtime_ms": t}))
            .collect();
        fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
        Ok(())
    }

    /// Aggregate table for terminal output.
    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        let mut s = format!(
            "pairs            {}\nrepeatability    {:.4}\nmatching score   {:.4}\nmean keypoints   {:.1}\n",
            self.pairs.len(),
            a.repeatability,
            a.matching_score,
            a.mean_keypoints
        );
        for (e, acc) in self.epsilons.iter().zip(&a.corner_accuracy) {
            s.push_str(&format!("corner acc @{e:<4} {acc:.4}\n"));
        }
        s
    }
}
