//! Aligned-pair datasets, training sample construction, label files and a
//! synthetic two-spectrum scene generator.
//!
//! Dataset layout: `root/spectrum_a/<id>.png` and `root/spectrum_b/<id>.png`,
//! with optional label files `<labels>/<id>.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_homography, warp_image, Homography, HomographySampleConfig};
use crate::losses::{cells_from_keypoints, keypoint_pixel, CellLabelGrid};
use crate::matching::{Keypoint, KeypointSet};
use crate::raster::{Border, GrayImage, ImageDims};

pub const SPECTRUM_A_DIR: &str = "spectrum_a";
pub const SPECTRUM_B_DIR: &str = "spectrum_b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spectrum {
    A,
    B,
}

impl Spectrum {
    pub fn other(self) -> Self {
        match self {
            Spectrum::A => Spectrum::B,
            Spectrum::B => Spectrum::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub id: String,
    pub image_a: GrayImage,
    pub image_b: GrayImage,
}

impl AlignedPair {
    pub fn new(id: impl Into<String>, image_a: GrayImage, image_b: GrayImage) -> Result<Self> {
        let id = id.into();
        if image_a.dims() != image_b.dims() {
            return Err(Error::ShapeMismatch(format!(
                "pair {id}: {}x{} vs {}x{}",
                image_a.height(),
                image_a.width(),
                image_b.height(),
                image_b.width()
            )));
        }
        Ok(Self { id, image_a, image_b })
    }

    pub fn dims(&self) -> ImageDims {
        self.image_a.dims()
    }

    pub fn image(&self, s: Spectrum) -> &GrayImage {
        match s {
            Spectrum::A => &self.image_a,
            Spectrum::B => &self.image_b,
        }
    }

    /// Write both images as 8-bit PNGs under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (dir, img) in [(SPECTRUM_A_DIR, &self.image_a), (SPECTRUM_B_DIR, &self.image_b)] {
            let d = root.join(dir);
            fs::create_dir_all(&d)?;
            img.save_png(&d.join(format!("{}.png", self.id)))?;
        }
        Ok(())
    }
}

/// Index of a dataset directory; images are read on access.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    ids: Vec<String>,
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Index the pairs under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let a = png_ids(&root.join(SPECTRUM_A_DIR))?;
    let b = png_ids(&root.join(SPECTRUM_B_DIR))?;
    if let Some(id) = a.symmetric_difference(&b).next() {
        let side = if a.contains(id) { SPECTRUM_A_DIR } else { SPECTRUM_B_DIR };
        return Err(Error::UnpairedImage(format!("{id} only present in {side}")));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        ids: a.into_iter().collect(),
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<AlignedPair> {
        let id = &self.ids[index];
        let load = |dir: &str| GrayImage::load_png(&self.root.join(dir).join(format!("{id}.png")));
        AlignedPair::new(id.clone(), load(SPECTRUM_A_DIR)?, load(SPECTRUM_B_DIR)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<AlignedPair>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// One pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub pair_id: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Settings used to produce the labels, echoed verbatim.
    pub config: serde_json::Value,
    pub keypoints: Vec<Keypoint>,
}

impl LabelRecord {
    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height)
    }

    pub fn keypoint_set(&self) -> KeypointSet {
        KeypointSet::new(self.keypoints.clone())
    }
}

pub fn label_path(dir: &Path, pair_id: &str) -> PathBuf {
    dir.join(format!("{pair_id}.json"))
}

pub fn write_label(path: &Path, rec: &LabelRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(rec)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_label(path: &Path) -> Result<LabelRecord> {
    let bad = |reason: String| Error::BadLabelFile {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let rec: LabelRecord = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let dims = rec.dims();
    if let Some(kp) = rec.keypoints.iter().find(|k| keypoint_pixel(k.x, k.y, dims).is_none()) {
        return Err(bad(format!("keypoint ({}, {}) outside the image", kp.x, kp.y)));
    }
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Side of the square crop; a multiple of 8.
    pub crop: usize,
    /// Probability that the two sides come from different spectra.
    pub cross_spectrum_prob: f64,
    pub warp: HomographySampleConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            cross_spectrum_prob: 0.5,
            warp: HomographySampleConfig::training(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 8 != 0 {
            return Err(Error::InvalidConfig(format!("crop {} is not a positive multiple of 8", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.cross_spectrum_prob) {
            return Err(Error::InvalidConfig("cross_spectrum_prob must be in [0, 1]".into()));
        }
        self.warp.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub src: GrayImage,
    pub dst: GrayImage,
    /// Maps `src` pixel coordinates to `dst` pixel coordinates.
    pub h_gt: Homography,
    pub keypoints_src: KeypointSet,
    pub keypoints_dst: KeypointSet,
    pub labels_src: CellLabelGrid,
    pub labels_dst: CellLabelGrid,
    pub spectra: (Spectrum, Spectrum),
}

fn in_frame(kps: impl Iterator<Item = Keypoint>, dims: ImageDims) -> KeypointSet {
    KeypointSet::new(kps.filter(|k| keypoint_pixel(k.x, k.y, dims).is_some()).collect())
}

/// Crop both spectra at a shared location, warp one side by a random
/// homography and carry the labels into both frames.
pub fn make_train_sample<R: Rng + ?Sized>(
    pair: &AlignedPair,
    labels: &KeypointSet,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<TrainSample> {
    cfg.validate()?;
    let dims = pair.dims();
    if dims.width < cfg.crop || dims.height < cfg.crop {
        return Err(Error::ImageTooSmall {
            height: dims.height,
            width: dims.width,
            crop: cfg.crop,
        });
    }
    let cross = rng.random::<f64>() < cfg.cross_spectrum_prob;
    let src_spec = if rng.random::<bool>() { Spectrum::A } else { Spectrum::B };
    let dst_spec = if cross { src_spec.other() } else { src_spec };
    let x0 = rng.random_range(0..=dims.width - cfg.crop);
    let y0 = rng.random_range(0..=dims.height - cfg.crop);
    let crop_dims = ImageDims::new(cfg.crop, cfg.crop);
    let h_gt = sample_homography(&cfg.warp, crop_dims, rng)?;

    let src = pair.image(src_spec).crop(x0, y0, cfg.crop, cfg.crop)?;
    let dst_unwarped = pair.image(dst_spec).crop(x0, y0, cfg.crop, cfg.crop)?;
    let dst = warp_image(&dst_unwarped, &h_gt, Border::Reflect)?;

    let shifted = labels
        .iter()
        .map(|k| Keypoint::new(k.x - x0 as f64, k.y - y0 as f64, k.score));
    let keypoints_src = in_frame(shifted, crop_dims);
    let warped = keypoints_src.iter().filter_map(|k| {
        h_gt.apply(Point2::new(k.x, k.y))
            .map(|p| Keypoint::new(p.x, p.y, k.score))
    });
    let keypoints_dst = in_frame(warped, crop_dims);
    let labels_src = cells_from_keypoints(&keypoints_src, crop_dims, rng)?;
    let labels_dst = cells_from_keypoints(&keypoints_dst, crop_dims, rng)?;
    Ok(TrainSample {
        src,
        dst,
        h_gt,
        keypoints_src,
        keypoints_dst,
        labels_src,
        labels_dst,
        spectra: (src_spec, dst_spec),
    })
}

/// Scene content for [`synth_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStyle {
    pub polygons: usize,
    pub lines: usize,
    pub blobs: usize,
    /// Probability that a shape keeps its polarity in spectrum B instead of
    /// being inverted like the rest of the scene.
    pub reversal_prob: f64,
    /// Minimum intensity difference between a shape and the mean background,
    /// enforced in both spectra so every shape stays visible in each.
    pub min_contrast: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            polygons: 12,
            lines: 6,
            blobs: 4,
            reversal_prob: 0.3,
            min_contrast: 0.2,
            blur_sigma: 0.7,
            noise_sigma: 0.02,
        }
    }
}

struct Canvas {
    a: GrayImage,
    b: GrayImage,
}

impl Canvas {
    fn paint(&mut self, r: usize, c: usize, cover: f64, va: f64, vb: f64) {
        if cover <= 0.0 {
            return;
        }
        let cover = cover.min(1.0);
        let pa = self.a.get(r, c);
        let pb = self.b.get(r, c);
        self.a.set(r, c, (1.0 - cover) * pa + cover * va);
        self.b.set(r, c, (1.0 - cover) * pb + cover * vb);
    }
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Render a random scene in two spectra sharing exact geometry.
///
/// Spectrum B maps each region's intensity through an inversion and a gamma
/// curve; a random subset of regions keeps its polarity instead, so local
/// contrast flips between the two images. Shade draws are repeated until the
/// shape clears `min_contrast` against the background in both spectra. B is
/// then blurred, and both images get additive noise.
pub fn synth_pair(seed: u64, dims: ImageDims, style: &SynthStyle) -> Result<AlignedPair> {
    if dims.is_empty() || !dims.is_multiple_of(8) {
        return Err(Error::BadInputDims {
            height: dims.height,
            width: dims.width,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (dims.width as f64, dims.height as f64);
    let size = w.min(h);
    let gamma: f64 = rng.random_range(0.6..1.6);
    // textured background: coarse value noise plus a sinusoid
    let step = 16.0;
    let gw = (w / step).ceil() as usize + 2;
    let gh = (h / step).ceil() as usize + 2;
    let base: f64 = rng.random_range(0.3..0.7);
    let base_b = (1.0 - base).powf(gamma);
    // shape intensity in both spectra; redrawn until it stands out in each
    let shade = |rng: &mut ChaCha8Rng| -> (f64, f64) {
        let mut best = (0.0, 0.0, f64::NEG_INFINITY);
        for _ in 0..32 {
            let va: f64 = rng.random_range(0.0..1.0);
            let vb = if rng.random::<f64>() < style.reversal_prob {
                va.powf(gamma)
            } else {
                (1.0 - va).powf(gamma)
            };
            let contrast = (va - base).abs().min((vb - base_b).abs());
            if contrast >= style.min_contrast {
                return (va, vb);
            }
            if contrast > best.2 {
                best = (va, vb, contrast);
            }
        }
        (best.0, best.1)
    };
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-0.12..0.12)).collect();
    let (fx, fy, phase): (f64, f64, f64) = (
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let background = GrayImage::from_fn(dims.width, dims.height, |r, c| {
        let (gx, gy) = (c as f64 / step, r as f64 / step);
        let (i, j) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (gx - i as f64, gy - j as f64);
        let g = |ii: usize, jj: usize| grid[jj * gw + ii];
        let noise = (1.0 - ty) * ((1.0 - tx) * g(i, j) + tx * g(i + 1, j))
            + ty * ((1.0 - tx) * g(i, j + 1) + tx * g(i + 1, j + 1));
        (base + noise + 0.04 * (fx * c as f64 + fy * r as f64 + phase).sin()).clamp(0.0, 1.0)
    });
    let bg_b = background.map(|v| (1.0 - v).powf(gamma));
    let mut canvas = Canvas {
        a: background,
        b: bg_b,
    };

    for _ in 0..style.polygons {
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let radius = rng.random_range(0.06..0.2) * size;
        let n = rng.random_range(3..=6);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|t| {
                let rr = radius * rng.random_range(0.5..1.0);
                (cx + rr * t.cos(), cy + rr * t.sin())
            })
            .collect();
        let (va, vb) = shade(&mut rng);
        let r0 = (cy - radius).floor().max(0.0) as usize;
        let r1 = ((cy + radius).ceil().max(0.0) as usize).min(dims.height);
        let c0 = (cx - radius).floor().max(0.0) as usize;
        let c1 = ((cx + radius).ceil().max(0.0) as usize).min(dims.width);
        for r in r0..r1 {
            for c in c0..c1 {
                // 2x2 supersampled coverage
                let mut cover = 0.0;
                for (dy, dx) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                    if inside_polygon(&poly, c as f64 + dx, r as f64 + dy) {
                        cover += 0.25;
                    }
                }
                canvas.paint(r, c, cover, va, vb);
            }
        }
    }

    for _ in 0..style.lines {
        let a = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let len = rng.random_range(0.2..0.6) * size;
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let b = (a.0 + len * t.cos(), a.1 + len * t.sin());
        let width: f64 = rng.random_range(1.5..3.0);
        let (va, vb) = shade(&mut rng);
        let pad = width + 1.0;
        let r0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
        let r1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(dims.height);
        let c0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
        let c1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(dims.width);
        for r in r0..r1 {
            for c in c0..c1 {
                let d = segment_distance((c as f64, r as f64), a, b);
                canvas.paint(r, c, (width / 2.0 + 0.5 - d).clamp(0.0, 1.0), va, vb);
            }
        }
    }

    for _ in 0..style.blobs {
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let sigma = rng.random_range(0.02..0.06) * size;
        let (va, vb) = shade(&mut rng);
        let reach = 3.0 * sigma;
        let r0 = (cy - reach).floor().max(0.0) as usize;
        let r1 = ((cy + reach).ceil().max(0.0) as usize).min(dims.height);
        let c0 = (cx - reach).floor().max(0.0) as usize;
        let c1 = ((cx + reach).ceil().max(0.0) as usize).min(dims.width);
        for r in r0..r1 {
            for c in c0..c1 {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                canvas.paint(r, c, (-d2 / (2.0 * sigma * sigma)).exp(), va, vb);
            }
        }
    }

    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let mut noisy = |img: GrayImage, sigma_scale: f64| {
        let mut img = img;
        for v in img.data_mut() {
            *v = (*v + sigma_scale * noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        img
    };
    let image_a = noisy(canvas.a, 0.5);
    let image_b = noisy(canvas.b.gaussian_blur(style.blur_sigma), 1.0);
    AlignedPair::new(format!("synth_{seed:06}"), image_a, image_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_sized() {
        let dims = ImageDims::new(64, 48);
        let a = synth_pair(7, dims, &SynthStyle::default()).unwrap();
        let b = synth_pair(7, dims, &SynthStyle::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), dims);
        assert!(a.image_a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_pair(1, ImageDims::new(60, 48), &SynthStyle::default()).is_err());
    }

    #[test]
    fn identity_sample_keeps_labels() {
        let pair = synth_pair(3, ImageDims::new(64, 64), &SynthStyle::default()).unwrap();
        let labels = KeypointSet::new(vec![Keypoint::new(10.0, 20.0, 0.5), Keypoint::new(40.0, 9.0, 0.7)]);
        let cfg = SampleConfig {
            crop: 64,
            cross_spectrum_prob: 0.5,
            warp: HomographySampleConfig::none(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_train_sample(&pair, &labels, &cfg, &mut rng).unwrap();
        assert_eq!(s.h_gt, Homography::identity());
        assert_eq!(s.labels_src, s.labels_dst);
        assert_eq!(s.labels_src.occupied(), 2);
        let small = SampleConfig { crop: 72, ..cfg };
        assert!(matches!(
            make_train_sample(&pair, &labels, &small, &mut rng),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = LabelRecord {
            pair_id: "p0".into(),
            width: 32,
            height: 16,
            seed: 9,
            config: serde_json::json!({"n_homographies": 5}),
            keypoints: vec![Keypoint::new(1.0, 2.0, 0.123456789123)],
        };
        let path = label_path(dir.path(), "p0");
        write_label(&path, &rec).unwrap();
        assert_eq!(read_label(&path).unwrap(), rec);
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(read_label(&path), Err(Error::BadLabelFile { .. })));
    }

    #[test]
    fn dataset_pairs_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
        for seed in [2, 0, 1] {
            synth_pair(seed, ImageDims::new(16, 16), &SynthStyle::default())
                .unwrap()
                .save(dir.path())
                .unwrap();
        }
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.ids(), ["synth_000000", "synth_000001", "synth_000002"]);
        assert_eq!(ds.iter().filter(|p| p.is_ok()).count(), 3);
        GrayImage::new(16, 16)
            .save_png(&dir.path().join(SPECTRUM_A_DIR).join("extra.png"))
            .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::UnpairedImage(_))));
    }
}
