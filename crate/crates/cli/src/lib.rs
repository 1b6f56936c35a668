//! Commands behind the `msmatch` binary.
//!
//! Every command writes `run.toml` (the fully resolved configuration) and
//! `manifest.json` (command, inputs, seed, version) into its output
//! directory so the run can be repeated exactly.

use std::fs;
use std::path::{Path, PathBuf};

use msmatch_core::adaptation::{finalize_keypoints, run_adaptation, AdaptationConfig, ShiTomasiDetector};
use msmatch_core::datahub::{
    label_path, load_dataset, read_label, synth_pair, write_label, AlignedPair, LabelRecord, SynthStyle,
};
use msmatch_core::evaluation::{run_protocol, DetectConfig, EvalConfig, EvalReport, FeatureExtractor, ModelExtractor};
use msmatch_core::matching::{mutual_nn_match, robust_homography, MatchSet};
use msmatch_core::network::{Model, ModelConfig};
use msmatch_core::training::{train, StepLog, TrainConfig};
use msmatch_core::{Error, GrayImage, Homography, ImageDims, KeypointSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("no consensus: {0}")]
    NoConsensus(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::NoConsensus(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_) => CliError::Config(msg),
            Error::NoConsensus | Error::InsufficientMatches { .. } => CliError::NoConsensus(msg),
            Error::Io(_)
            | Error::Image { .. }
            | Error::Json(_)
            | Error::UnpairedImage(_)
            | Error::ShapeMismatch(_)
            | Error::BadInputDims { .. }
            | Error::ImageTooSmall { .. }
            | Error::BadLabelFile { .. }
            | Error::BadCheckpoint(_)
            | Error::KeypointOutOfBounds { .. } => CliError::Data(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn with_context(context: impl std::fmt::Display) -> impl FnOnce(Error) -> CliError {
    move |e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
        CliError::Data(m) => CliError::Data(format!("{context}: {m}")),
        CliError::NoConsensus(m) => CliError::NoConsensus(format!("{context}: {m}")),
        CliError::Other(m) => CliError::Other(format!("{context}: {m}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub style: SynthStyle,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 64,
            width: 128,
            height: 128,
            style: SynthStyle::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    pub adaptation: AdaptationConfig,
    pub detector: ShiTomasiDetector,
    pub max_keypoints: usize,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            adaptation: AdaptationConfig::default(),
            detector: ShiTomasiDetector::default(),
            max_keypoints: 1000,
        }
    }
}

/// Configuration for every command; one file can drive a whole experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub synth: SynthSection,
    pub label: LabelSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.label.adaptation.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.synth.width % 8 != 0 || self.synth.height % 8 != 0 || self.synth.width == 0 || self.synth.height == 0 {
            return Err(CliError::Config("synth dims must be positive multiples of 8".into()));
        }
        Ok(())
    }
}

/// Flag values that take precedence over the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub det_threshold: Option<f64>,
    pub nms_radius: Option<usize>,
    pub reproj_threshold: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.eval.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(t) = self.det_threshold {
            cfg.detect.det_threshold = t;
        }
        if let Some(r) = self.nms_radius {
            cfg.detect.nms_radius = r;
        }
        if let Some(t) = self.reproj_threshold {
            cfg.eval.robust.reproj_threshold = t;
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    inputs: Vec<String>,
}

fn write_run_files(out: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("run.toml"), cfg.to_toml())?;
    let manifest = Manifest {
        command,
        version: VERSION,
        seed: cfg.seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Render `synth.count` synthetic pairs into a dataset directory.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<usize> {
    cfg.validate()?;
    let dims = ImageDims::new(cfg.synth.width, cfg.synth.height);
    (0..cfg.synth.count as u64).into_par_iter().try_for_each(|i| -> CliResult<()> {
        let pair = synth_pair(cfg.seed.wrapping_add(i), dims, &cfg.synth.style)?;
        pair.save(out)?;
        Ok(())
    })?;
    write_run_files(out, "synth", cfg, &[])?;
    Ok(cfg.synth.count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub pairs: usize,
    pub total_keypoints: usize,
    pub mean_keypoints: f64,
}

/// Label one pair; the random stream is selected by the pair's index so
/// pairs can be processed in any order.
pub fn label_pair(pair: &AlignedPair, index: usize, cfg: &RunConfig) -> Result<LabelRecord, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let map = run_adaptation(&pair.image_a, &pair.image_b, &cfg.label.detector, &cfg.label.adaptation, &mut rng)?;
    let kps = finalize_keypoints(&map, cfg.label.max_keypoints);
    Ok(LabelRecord {
        pair_id: pair.id.clone(),
        width: pair.dims().width,
        height: pair.dims().height,
        seed: cfg.seed,
        config: serde_json::json!({
            "stream": index,
            "adaptation": cfg.label.adaptation,
            "detector": cfg.label.detector,
            "max_keypoints": cfg.label.max_keypoints,
        }),
        keypoints: kps.points,
    })
}

/// Pseudo-label every pair of a dataset by multispectral homographic adaptation.
pub fn cmd_label(dataset: &Path, cfg: &RunConfig, out: &Path) -> CliResult<LabelSummary> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    fs::create_dir_all(out)?;
    let counts: Vec<usize> = (0..ds.len())
        .into_par_iter()
        .map(|i| -> CliResult<usize> {
            let id = &ds.ids()[i];
            let pair = ds.get(i).map_err(with_context(format!("pair {id}")))?;
            let rec = label_pair(&pair, i, cfg).map_err(with_context(format!("pair {id}")))?;
            write_label(&label_path(out, id), &rec)?;
            Ok(rec.keypoints.len())
        })
        .collect::<CliResult<_>>()?;
    let total: usize = counts.iter().sum();
    let summary = LabelSummary {
        pairs: counts.len(),
        total_keypoints: total,
        mean_keypoints: if counts.is_empty() { 0.0 } else { total as f64 / counts.len() as f64 },
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_run_files(out, "label", cfg, &[dataset])?;
    Ok(summary)
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

/// Train from a dataset and its label directory. Returns the final checkpoint.
pub fn cmd_train(dataset: &Path, labels: &Path, cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("no pairs under {}", dataset.display())));
    }
    let mut pairs = Vec::with_capacity(ds.len());
    let mut kps: Vec<KeypointSet> = Vec::with_capacity(ds.len());
    for (i, id) in ds.ids().iter().enumerate() {
        let pair = ds.get(i).map_err(with_context(format!("pair {id}")))?;
        let rec = read_label(&label_path(labels, id))?;
        if rec.dims() != pair.dims() {
            return Err(CliError::Data(format!("labels for {id} have different dims")));
        }
        kps.push(rec.keypoint_set());
        pairs.push(pair);
    }
    write_run_files(out, "train", cfg, &[dataset, labels])?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let log_path = out.join("log.jsonl");
    let mut log = String::new();
    let steps = cfg.train.steps;
    let every = cfg.train.checkpoint_every.max(1);
    let mut last = None;
    let result = train(&mut model, &pairs, &kps, &cfg.train, cfg.seed, &mut |entry: &StepLog, m: &Model| {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
        fs::write(&log_path, &log)?;
        if entry.step % every == 0 || entry.step == steps {
            let dir = checkpoint_dir(out, entry.step);
            m.save(&dir)?;
            last = Some(dir);
        }
        if entry.step % 10 == 0 || entry.step == 1 {
            log::info!("step {} loss {:.4}", entry.step, entry.total);
        }
        Ok(())
    });
    if let Err(e) = result {
        if let Some(dir) = &last {
            log::error!("training stopped; last good checkpoint is {}", dir.display());
        }
        return Err(e.into());
    }
    fs::write(&log_path, &log)?;
    last.ok_or_else(|| CliError::Config("training ran zero steps".into()))
}

fn load_pairs(dataset: &Path) -> CliResult<Vec<AlignedPair>> {
    let ds = load_dataset(dataset)?;
    ds.iter().collect::<Result<Vec<_>, _>>().map_err(Into::into)
}

pub fn cmd_eval(dataset: &Path, checkpoint: &Path, cfg: &RunConfig, out: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let model = Model::load(checkpoint)?;
    let pairs = load_pairs(dataset)?;
    let extractor = ModelExtractor {
        model: &model,
        detect: cfg.detect.clone(),
    };
    let report = run_protocol(&extractor, &pairs, &cfg.eval)?;
    write_run_files(out, "eval", cfg, &[dataset, checkpoint])?;
    report.write(out)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchRecord {
    pub keypoints_a: KeypointSet,
    pub keypoints_b: KeypointSet,
    pub matches: MatchSet,
    /// Maps image A coordinates to image B coordinates.
    pub homography: Option<Homography>,
}

fn match_images(model: &Model, a: &GrayImage, b: &GrayImage, cfg: &RunConfig) -> CliResult<(MatchRecord, Option<CliError>)> {
    let extractor = ModelExtractor {
        model,
        detect: cfg.detect.clone(),
    };
    let fa = extractor.extract(a)?;
    let fb = extractor.extract(b)?;
    let mut matches = mutual_nn_match(&fa.descriptors, &fb.descriptors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (homography, failure) = match robust_homography(&fa.keypoints, &fb.keypoints, &matches, &cfg.eval.robust, &mut rng) {
        Ok(fit) => {
            matches.inlier = Some(fit.inliers);
            (Some(fit.homography), None)
        }
        Err(e @ (Error::NoConsensus | Error::InsufficientMatches { .. })) => (None, Some(CliError::from(e))),
        Err(e) => return Err(e.into()),
    };
    Ok((
        MatchRecord {
            keypoints_a: fa.keypoints,
            keypoints_b: fb.keypoints,
            matches,
            homography,
        },
        failure,
    ))
}

fn load_image(path: &Path) -> CliResult<GrayImage> {
    GrayImage::load_png(path).map_err(Into::into)
}

/// Detect, describe and match two images; writes `matches.json` and a
/// side-by-side `matches.png`.
pub fn cmd_match(image_a: &Path, image_b: &Path, checkpoint: &Path, cfg: &RunConfig, out: &Path) -> CliResult<MatchRecord> {
    cfg.validate()?;
    let model = Model::load(checkpoint)?;
    let (a, b) = (load_image(image_a)?, load_image(image_b)?);
    let (rec, _) = match_images(&model, &a, &b, cfg)?;
    write_run_files(out, "match", cfg, &[image_a, image_b, checkpoint])?;
    write_json(&out.join("matches.json"), &rec)?;
    viz::draw_matches(&a, &b, &rec).save(out.join("matches.png")).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(rec)
}

/// Estimate the homography from image A to image B and write it together
/// with the match diagnostics and an overlay of B warped into A's frame.
pub fn cmd_register(image_a: &Path, image_b: &Path, checkpoint: &Path, cfg: &RunConfig, out: &Path) -> CliResult<Homography> {
    cfg.validate()?;
    let model = Model::load(checkpoint)?;
    let (a, b) = (load_image(image_a)?, load_image(image_b)?);
    let (rec, failure) = match_images(&model, &a, &b, cfg)?;
    write_run_files(out, "register", cfg, &[image_a, image_b, checkpoint])?;
    write_json(&out.join("matches.json"), &rec)?;
    viz::draw_matches(&a, &b, &rec).save(out.join("matches.png")).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(err) = failure {
        return Err(err);
    }
    let h = rec.homography.expect("fit succeeded");
    write_json(
        &out.join("homography.json"),
        &serde_json::json!({ "matrix": h.to_row_major(), "inliers": rec.matches.inlier.as_ref().map_or(0, |v| v.iter().filter(|&&x| x).count()) }),
    )?;
    viz::overlay(&a, &b, &h)?.save(out.join("overlay.png")).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(h)
}

mod viz {
    use super::*;
    use image::{Rgb, RgbImage};
    use msmatch_core::geometry::warp_image;
    use msmatch_core::Border;

    fn byte(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, color);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Both images side by side; inlier matches green, others red.
    pub fn draw_matches(a: &GrayImage, b: &GrayImage, rec: &MatchRecord) -> RgbImage {
        let w = (a.width() + b.width()) as u32;
        let h = a.height().max(b.height()) as u32;
        let mut img = RgbImage::new(w, h);
        for (off, src) in [(0, a), (a.width(), b)] {
            for r in 0..src.height() {
                for c in 0..src.width() {
                    let v = byte(src.get(r, c));
                    img.put_pixel((off + c) as u32, r as u32, Rgb([v, v, v]));
                }
            }
        }
        for (i, m) in rec.matches.pairs.iter().enumerate() {
            let inlier = rec.matches.inlier.as_ref().is_some_and(|v| v[i]);
            let color = if inlier { Rgb([0, 255, 0]) } else { Rgb([255, 0, 0]) };
            let p = rec.keypoints_a.points[m.index_a];
            let q = rec.keypoints_b.points[m.index_b];
            line(
                &mut img,
                (p.x.round() as i64, p.y.round() as i64),
                ((q.x + a.width() as f64).round() as i64, q.y.round() as i64),
                color,
            );
        }
        img
    }

    /// Image A in the red channel, B resampled into A's frame in green.
    pub fn overlay(a: &GrayImage, b: &GrayImage, h: &Homography) -> CliResult<RgbImage> {
        let canvas = GrayImage::from_fn(a.width(), a.height(), |r, c| {
            if r < b.height() && c < b.width() {
                b.get(r, c)
            } else {
                0.0
            }
        });
        // sample B at h(p) for every pixel p of A
        let warped = warp_image(&canvas, &h.inverse()?, Border::Zero)?;
        let mut img = RgbImage::new(a.width() as u32, a.height() as u32);
        for r in 0..a.height() {
            for c in 0..a.width() {
                img.put_pixel(c as u32, r as u32, Rgb([byte(a.get(r, c)), byte(warped.get(r, c)), 0]));
            }
        }
        Ok(img)
    }
}
