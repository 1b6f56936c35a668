//! Encoder, the three joint heads, and checkpoint persistence.
//!
//! Tensors are NCHW. A pair batch stacks the first images of all pairs
//! followed by the second images, so the homography head can split the
//! batch in half.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FourPointDelta, CORNER_ORDER};
use crate::matching::DescriptorField;
use crate::raster::{GrayImage, ImageDims};
use crate::tape::{Graph, Mode, Tensor, Var};

pub const CELL: usize = 8;
pub const CELL_CLASSES: usize = 65;
pub const DUSTBIN: usize = 64;
/// In-cell channel ordering: channel `c` is offset `(c / 8, c % 8)`.
pub const CELL_ORDER: &str = "row-major";
pub const CHECKPOINT_VERSION: &str = "msmatch-ckpt-1";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels x height x width`, row-major.
    pub data: Vec<f64>,
    pub source_dims: ImageDims,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellLogits {
    pub height: usize,
    pub width: usize,
    /// `65 x height x width`.
    pub data: Vec<f64>,
}

impl CellLogits {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CELL_CLASSES * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for a {height}x{width} cell grid",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, class: usize, h: usize, w: usize) -> f64 {
        self.data[(class * self.height + h) * self.width + w]
    }

    /// Channel softmax per cell, same layout as `data`.
    pub fn softmax(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..hw {
            let max = (0..CELL_CLASSES)
                .map(|c| self.data[c * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..CELL_CLASSES {
                let e = (self.data[c * hw + p] - max).exp();
                out[c * hw + p] = e;
                sum += e;
            }
            for c in 0..CELL_CLASSES {
                out[c * hw + p] /= sum;
            }
        }
        out
    }
}

/// Softmax over the 65 channels, dustbin dropped, each cell's 64
/// probabilities scattered into its 8x8 pixel block.
pub fn logits_to_heatmap(x: &CellLogits) -> GrayImage {
    let probs = x.softmax();
    let hw = x.height * x.width;
    let mut out = GrayImage::new(x.width * CELL, x.height * CELL);
    for h in 0..x.height {
        for w in 0..x.width {
            for c in 0..DUSTBIN {
                let (dr, dc) = (c / CELL, c % CELL);
                out.set(h * CELL + dr, w * CELL + dc, probs[c * hw + h * x.width + w]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    /// `dim x height x width`.
    pub data: Vec<f64>,
}

impl DescriptorGrid {
    pub fn cell(&self, h: usize, w: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.dim).map(|k| self.data[k * hw + h * self.width + w]).collect()
    }

    /// Descriptors as one row per cell, cells in row-major order.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for h in 0..self.height {
            for w in 0..self.width {
                out.push(self.cell(h, w));
            }
        }
        out
    }
}

/// Cubic convolution kernel with `a = -0.75`.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(pos: f64, n: usize) -> [(usize, f64); 4] {
    let base = pos.floor();
    let frac = pos - base;
    let mut taps = [(0, 0.0); 4];
    for (k, tap) in taps.iter_mut().enumerate() {
        let i = base as isize + k as isize - 1;
        let idx = i.clamp(0, n as isize - 1) as usize;
        *tap = (idx, cubic_weight(frac - (k as f64 - 1.0)));
    }
    taps
}

/// Pixel-resolution view of a coarse grid: bicubic upsampling by 8 with cell
/// centers at pixel `8h + 3.5`, renormalized per pixel. Values are computed
/// on demand.
pub struct DenseDescriptors<'a> {
    grid: &'a DescriptorGrid,
}

pub fn densify_descriptors(g: &DescriptorGrid) -> DenseDescriptors<'_> {
    DenseDescriptors { grid: g }
}

impl DenseDescriptors<'_> {
    /// Unnormalized bicubic value at continuous pixel coordinates.
    fn interpolate(&self, y: f64, x: f64) -> Vec<f64> {
        let g = self.grid;
        let rows = cubic_taps((y - 3.5) / CELL as f64, g.height);
        let cols = cubic_taps((x - 3.5) / CELL as f64, g.width);
        let hw = g.height * g.width;
        let mut out = vec![0.0; g.dim];
        for &(r, wr) in &rows {
            for &(c, wc) in &cols {
                let wgt = wr * wc;
                if wgt == 0.0 {
                    continue;
                }
                let p = r * g.width + c;
                for (k, o) in out.iter_mut().enumerate() {
                    *o += wgt * g.data[k * hw + p];
                }
            }
        }
        out
    }

    /// Descriptor at continuous pixel coordinates.
    pub fn at_point(&self, x: f64, y: f64) -> Vec<f64> {
        let mut v = self.interpolate(y, x);
        crate::matching::l2_normalize(&mut v);
        v
    }

    /// Full `H x W x D` field, pixel-major.
    pub fn materialize(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width() * self.height());
        for r in 0..self.height() {
            for c in 0..self.width() {
                out.push(self.at(r, c));
            }
        }
        out
    }
}

impl DescriptorField for DenseDescriptors<'_> {
    fn width(&self) -> usize {
        self.grid.width * CELL
    }

    fn height(&self) -> usize {
        self.grid.height * CELL
    }

    fn dim(&self) -> usize {
        self.grid.dim
    }

    fn at(&self, row: usize, col: usize) -> Vec<f64> {
        self.at_point(col as f64, row as f64)
    }
}

/// Cosine-similarity matrix between two sets of feature rows.
pub fn cost_volume(x1: &[Vec<f64>], x2: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if x1.len() != x2.len() || x1.iter().chain(x2).any(|r| r.len() != x1[0].len()) || x1[0].is_empty() {
        return Err(Error::ShapeMismatch("cost volume inputs must be equal L x K, K >= 1".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(x1
        .iter()
        .map(|a| {
            let na = norm(a);
            x2.iter()
                .map(|b| {
                    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    dot / (na * norm(b) + crate::tape::COST_VOLUME_EPS)
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the four conv stages; strides are 1, 2, 2, 2.
    pub channels: [usize; 4],
    /// Additional stride-1 conv blocks appended to each stage; widens the
    /// receptive field cheaply when placed at the coarse stages.
    #[serde(default)]
    pub extra_blocks: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 128],
            extra_blocks: [0; 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomographyHeadConfig {
    pub layer1_channels: usize,
    pub pool_size: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// The final layer predicts deltas in units of this many pixels.
    pub output_scale: f64,
}

impl Default for HomographyHeadConfig {
    fn default() -> Self {
        Self {
            layer1_channels: 64,
            pool_size: 16,
            hidden: 1024,
            dropout: 0.5,
            output_scale: 32.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub descriptor_dim: usize,
    pub homography: HomographyHeadConfig,
    pub batch_norm_momentum: f64,
    pub batch_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            descriptor_dim: 256,
            homography: HomographyHeadConfig::default(),
            batch_norm_momentum: 0.1,
            batch_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments (under 1M parameters).
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: [16, 32, 64, 64],
                extra_blocks: [0, 0, 1, 2],
            },
            descriptor_dim: 64,
            homography: HomographyHeadConfig {
                layer1_channels: 32,
                pool_size: 16,
                hidden: 256,
                dropout: 0.5,
                output_scale: 32.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.encoder.channels.contains(&0) || self.descriptor_dim == 0 {
            return bad("channel counts must be positive");
        }
        let h = &self.homography;
        if h.layer1_channels == 0 || h.pool_size == 0 || h.hidden == 0 {
            return bad("homography head sizes must be positive");
        }
        if !(0.0..1.0).contains(&h.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.batch_norm_momentum > 0.0 && self.batch_norm_momentum <= 1.0) {
            return bad("batch norm momentum must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Named parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn kaiming(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.params.insert(name.to_string(), Tensor::new(shape, data));
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) {
        self.params.insert(name.to_string(), Tensor::filled(shape, v));
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
        self.kaiming(&format!("{prefix}.weight"), vec![cout, cin, k, k], cin * k * k, 1.0, rng);
        self.constant(&format!("{prefix}.bias"), vec![cout], 0.0);
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.constant(&format!("{prefix}.gamma"), vec![c], 1.0);
        self.constant(&format!("{prefix}.beta"), vec![c], 0.0);
        self.stats.insert(
            prefix.to_string(),
            RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            },
        );
    }
}

/// One forward pass under construction: the graph plus the parameter leaves
/// it has pulled in and the batch statistics it observed.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    leaves: BTreeMap<String, Var>,
    bn_eps: f64,
    pub batch_stats: Vec<(String, RunningStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, seed: u64, bn_eps: f64) -> Self {
        Self {
            graph: Graph::new(mode, seed),
            store,
            leaves: BTreeMap::new(),
            bn_eps,
            batch_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.leaves.get(name) {
            return *v;
        }
        let v = self.graph.param(name, self.store.get(name));
        self.leaves.insert(name.to_string(), v);
        v
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.graph.conv2d(x, w, Some(b), stride, pad)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        match self.graph.mode() {
            Mode::Train => {
                let (y, mean, var) = self.graph.batch_norm(x, gamma, beta, self.bn_eps);
                self.batch_stats.push((prefix.to_string(), RunningStats { mean, var }));
                y
            }
            Mode::Eval => {
                let s = &self.store.stats[prefix];
                self.graph
                    .batch_norm_frozen(x, gamma, beta, &s.mean, &s.var, self.bn_eps)
            }
        }
    }

    pub fn conv_bn_relu(&mut self, prefix: &str, x: Var, stride: usize) -> Var {
        let y = self.conv(&format!("{prefix}.conv"), x, stride, 1);
        let y = self.batch_norm(&format!("{prefix}.bn"), y);
        self.graph.relu(y)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.graph.linear(x, w, b)
    }
}

/// Pluggable backbone producing an `H/8 x W/8 x C_f` feature map.
pub trait Encoder: Send + Sync {
    fn name(&self) -> &str;
    fn channels(&self) -> usize;
    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng);
    /// `x` is `[N, 1, H, W]`; returns `[N, C_f, H/8, W/8]`.
    fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Var;
}

/// Four `conv3x3 -> batch norm -> ReLU` stages with strides 1, 2, 2, 2.
pub struct ConvEncoder {
    cfg: EncoderConfig,
}

const ENCODER_STRIDES: [usize; 4] = [1, 2, 2, 2];

impl ConvEncoder {
    pub const NAME: &'static str = "conv4";

    pub fn new(cfg: EncoderConfig) -> Self {
        Self { cfg }
    }
}

impl Encoder for ConvEncoder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn channels(&self) -> usize {
        self.cfg.channels[3]
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut cin = 1;
        for (i, &c) in self.cfg.channels.iter().enumerate() {
            store.conv(&format!("encoder.{i}.conv"), cin, c, 3, rng);
            store.batch_norm(&format!("encoder.{i}.bn"), c);
            for k in 0..self.cfg.extra_blocks[i] {
                store.conv(&format!("encoder.{i}.extra.{k}.conv"), c, c, 3, rng);
                store.batch_norm(&format!("encoder.{i}.extra.{k}.bn"), c);
            }
            cin = c;
        }
    }

    fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Var {
        let mut y = x;
        for (i, &s) in ENCODER_STRIDES.iter().enumerate() {
            y = fwd.conv_bn_relu(&format!("encoder.{i}"), y, s);
            for k in 0..self.cfg.extra_blocks[i] {
                y = fwd.conv_bn_relu(&format!("encoder.{i}.extra.{k}"), y, 1);
            }
        }
        y
    }
}

/// Graph handles for the head outputs of one forward pass.
pub struct HeadVars {
    pub features: Var,
    /// `[N, 65, h, w]`.
    pub logits: Var,
    /// `[N, D, h, w]`, unit norm per location.
    pub descriptors: Var,
    /// `[N/2, 8]` when run on a pair batch.
    pub homography: Option<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub encoder: Box<dyn Encoder>,
    pub store: ParamStore,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("encoder", &self.encoder.name())
            .field("config", &self.config)
            .finish()
    }
}

pub fn check_input_dims(dims: ImageDims) -> Result<()> {
    if dims.width == 0 || dims.height == 0 || !dims.is_multiple_of(CELL) {
        return Err(Error::BadInputDims {
            height: dims.height,
            width: dims.width,
        });
    }
    Ok(())
}

impl Model {
    /// Default convolutional encoder with freshly initialized weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Box::new(ConvEncoder::new(config.encoder.clone()));
        Ok(Self::with_encoder(config, encoder, seed))
    }

    pub fn with_encoder(config: ModelConfig, encoder: Box<dyn Encoder>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        encoder.init_params(&mut store, &mut rng);
        let cf = encoder.channels();
        store.conv("detect", cf, CELL_CLASSES, 1, &mut rng);
        store.conv("describe", cf, config.descriptor_dim, 1, &mut rng);
        let h = &config.homography;
        store.conv("homography.layer1.conv", cf, h.layer1_channels, 3, &mut rng);
        store.batch_norm("homography.layer1.bn", h.layer1_channels);
        let flat = h.pool_size * h.pool_size;
        store.kaiming("homography.fc1.weight", vec![h.hidden, flat], flat, 1.0, &mut rng);
        store.constant("homography.fc1.bias", vec![h.hidden], 0.0);
        store.kaiming("homography.fc2.weight", vec![8, h.hidden], h.hidden, 0.1, &mut rng);
        store.constant("homography.fc2.bias", vec![8], 0.0);
        Self {
            config,
            encoder,
            store,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Build the full forward graph. `images` is `[N, 1, H, W]`; when
    /// `pairs` is set, `N` must be even and the homography head compares
    /// sample `i` with sample `N/2 + i`.
    pub fn build(&self, fwd: &mut Forward<'_>, images: Var, pairs: bool) -> HeadVars {
        let features = self.encoder.forward(fwd, images);
        let logits = fwd.conv("detect", features, 1, 0);
        let raw = fwd.conv("describe", features, 1, 0);
        let descriptors = fwd.graph.normalize_channels(raw);
        let homography = pairs.then(|| self.homography_graph(fwd, features));
        HeadVars {
            features,
            logits,
            descriptors,
            homography,
        }
    }

    fn homography_graph(&self, fwd: &mut Forward<'_>, features: Var) -> Var {
        let h = &self.config.homography;
        let y = fwd.conv_bn_relu("homography.layer1", features, 1);
        let y = fwd.graph.max_pool2(y);
        let cv = fwd.graph.cost_volume(y);
        let pooled = fwd.graph.adaptive_avg_pool(cv, h.pool_size, h.pool_size);
        let b = fwd.graph.value(pooled).shape()[0];
        let flat = fwd.graph.reshape(pooled, vec![b, h.pool_size * h.pool_size]);
        let z = fwd.linear("homography.fc1", flat);
        let z = fwd.graph.relu(z);
        let z = fwd.graph.dropout(z, h.dropout);
        fwd.linear("homography.fc2", z)
    }

    pub fn output_scale(&self) -> f64 {
        self.config.homography.output_scale
    }

    /// Fold observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, batch_stats: &[(String, RunningStats)]) {
        let m = self.config.batch_norm_momentum;
        for (name, s) in batch_stats {
            let r = self.store.stats.get_mut(name).expect("known batch norm");
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = (1.0 - m) * *a + m * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var) {
                *a = (1.0 - m) * *a + m * b;
            }
        }
    }

    fn image_batch(images: &[&GrayImage]) -> Result<Tensor> {
        let dims = images[0].dims();
        check_input_dims(dims)?;
        let mut data = Vec::with_capacity(images.len() * dims.len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::ShapeMismatch("batch images differ in size".into()));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::new(vec![images.len(), 1, dims.height, dims.width], data))
    }

    pub fn encode(&self, img: &GrayImage) -> Result<FeatureMap> {
        let x = Self::image_batch(&[img])?;
        let mut fwd = Forward::new(&self.store, Mode::Eval, 0, self.config.batch_norm_eps);
        let xv = fwd.graph.input(x);
        let f = self.encoder.forward(&mut fwd, xv);
        let t = fwd.graph.value(f);
        let s = t.shape();
        Ok(FeatureMap {
            channels: s[1],
            height: s[2],
            width: s[3],
            data: t.data().to_vec(),
            source_dims: img.dims(),
        })
    }

    fn feature_input(&self, fwd: &mut Forward<'_>, maps: &[&FeatureMap]) -> Result<Var> {
        let f0 = maps[0];
        if f0.channels != self.encoder.channels() {
            return Err(Error::ShapeMismatch(format!(
                "feature map has {} channels, encoder produces {}",
                f0.channels,
                self.encoder.channels()
            )));
        }
        let mut data = Vec::new();
        for f in maps {
            if (f.channels, f.height, f.width) != (f0.channels, f0.height, f0.width) {
                return Err(Error::ShapeMismatch("feature maps differ in shape".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(fwd.graph.input(Tensor::new(
            vec![maps.len(), f0.channels, f0.height, f0.width],
            data,
        )))
    }

    pub fn detect_head(&self, f: &FeatureMap) -> Result<CellLogits> {
        let mut fwd = Forward::new(&self.store, Mode::Eval, 0, self.config.batch_norm_eps);
        let x = self.feature_input(&mut fwd, &[f])?;
        let y = fwd.conv("detect", x, 1, 0);
        CellLogits::new(f.height, f.width, fwd.graph.value(y).data().to_vec())
    }

    pub fn describe_head(&self, f: &FeatureMap) -> Result<DescriptorGrid> {
        let mut fwd = Forward::new(&self.store, Mode::Eval, 0, self.config.batch_norm_eps);
        let x = self.feature_input(&mut fwd, &[f])?;
        let y = fwd.conv("describe", x, 1, 0);
        let y = fwd.graph.normalize_channels(y);
        Ok(DescriptorGrid {
            dim: self.config.descriptor_dim,
            height: f.height,
            width: f.width,
            data: fwd.graph.value(y).data().to_vec(),
        })
    }

    pub fn homography_head(&self, f1: &FeatureMap, f2: &FeatureMap) -> Result<FourPointDelta> {
        let mut fwd = Forward::new(&self.store, Mode::Eval, 0, self.config.batch_norm_eps);
        let x = self.feature_input(&mut fwd, &[f1, f2])?;
        let y = self.homography_graph(&mut fwd, x);
        let out = fwd.graph.value(y).data();
        let s = self.output_scale();
        let mut flat = [0.0; 8];
        for (o, v) in flat.iter_mut().zip(out) {
            *o = v * s;
        }
        FourPointDelta::from_flat(flat)
    }

    /// Detector logits and coarse descriptors for one image (inference mode).
    pub fn infer(&self, img: &GrayImage) -> Result<(CellLogits, DescriptorGrid)> {
        let x = Self::image_batch(&[img])?;
        let mut fwd = Forward::new(&self.store, Mode::Eval, 0, self.config.batch_norm_eps);
        let xv = fwd.graph.input(x);
        let heads = self.build(&mut fwd, xv, false);
        let ls = fwd.graph.value(heads.logits);
        let (h, w) = (ls.shape()[2], ls.shape()[3]);
        let logits = CellLogits::new(h, w, ls.data().to_vec())?;
        let desc = DescriptorGrid {
            dim: self.config.descriptor_dim,
            height: h,
            width: w,
            data: fwd.graph.value(heads.descriptors).data().to_vec(),
        };
        Ok((logits, desc))
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            version: CHECKPOINT_VERSION.to_string(),
            encoder: self.encoder.name().to_string(),
            feature_channels: self.encoder.channels(),
            descriptor_dim: self.config.descriptor_dim,
            cell_order: CELL_ORDER.to_string(),
            corner_order: CORNER_ORDER.to_string(),
            config: self.config.clone(),
        }
    }

    /// Write `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        let mut buf = Vec::new();
        let write_entry = |buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]| {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        buf.extend_from_slice(PARAMS_MAGIC);
        let count = self.store.params.len() + 2 * self.store.stats.len();
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &self.store.params {
            write_entry(&mut buf, name, t.shape(), t.data());
        }
        for (name, s) in &self.store.stats {
            write_entry(&mut buf, &format!("{name}#mean"), &[s.mean.len()], &s.mean);
            write_entry(&mut buf, &format!("{name}#var"), &[s.var.len()], &s.var);
        }
        let mut f = fs::File::create(dir.join("params.bin"))?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save`], validating the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::BadCheckpoint(format!("{}: {e}", dir.join("manifest.json").display())))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::BadCheckpoint(format!("manifest: {e}")))?;
        manifest.validate()?;
        let mut model = Self::new(manifest.config.clone(), 0)?;
        if model.encoder.name() != manifest.encoder || model.encoder.channels() != manifest.feature_channels {
            return Err(Error::BadCheckpoint(format!(
                "encoder {} with {} channels is not available",
                manifest.encoder, manifest.feature_channels
            )));
        }
        let mut bytes = Vec::new();
        fs::File::open(dir.join("params.bin"))
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::BadCheckpoint(format!("params.bin: {e}")))?;
        let entries = parse_params(&bytes)?;
        let mut seen = 0;
        for (name, shape, data) in entries {
            seen += 1;
            let bad_shape = || Error::BadCheckpoint(format!("unexpected shape for {name}"));
            if let Some((prefix, which)) = name.split_once('#') {
                let s = model
                    .store
                    .stats
                    .get_mut(prefix)
                    .ok_or_else(|| Error::BadCheckpoint(format!("unknown statistic {name}")))?;
                let target = if which == "mean" { &mut s.mean } else { &mut s.var };
                if target.len() != data.len() {
                    return Err(bad_shape());
                }
                *target = data;
            } else {
                let t = model
                    .store
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::BadCheckpoint(format!("unknown parameter {name}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(bad_shape());
                }
                *t = Tensor::new(shape, data);
            }
        }
        if seen != model.store.params.len() + 2 * model.store.stats.len() {
            return Err(Error::BadCheckpoint("parameter count mismatch".into()));
        }
        Ok(model)
    }
}

const PARAMS_MAGIC: &[u8; 8] = b"MSMPRM01";

type ParamEntry = (String, Vec<usize>, Vec<f64>);

fn parse_params(bytes: &[u8]) -> Result<Vec<ParamEntry>> {
    let truncated = || Error::BadCheckpoint("params.bin is truncated".into());
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
        pos += n;
        Ok(s)
    };
    if take(8)? != PARAMS_MAGIC {
        return Err(Error::BadCheckpoint("params.bin has a bad header".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u32_at(take(4)?);
        let name = String::from_utf8(take(nlen)?.to_vec())
            .map_err(|_| Error::BadCheckpoint("parameter name is not utf-8".into()))?;
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(Error::BadCheckpoint("trailing bytes in params.bin".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: String,
    pub encoder: String,
    pub feature_channels: usize,
    pub descriptor_dim: usize,
    pub cell_order: String,
    pub corner_order: String,
    pub config: ModelConfig,
}

impl CheckpointManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {}", self.version)));
        }
        if self.cell_order != CELL_ORDER {
            return Err(Error::BadCheckpoint(format!(
                "cell ordering {} does not match {CELL_ORDER}",
                self.cell_order
            )));
        }
        if self.corner_order != CORNER_ORDER {
            return Err(Error::BadCheckpoint(format!(
                "corner ordering {} does not match {CORNER_ORDER}",
                self.corner_order
            )));
        }
        if self.descriptor_dim != self.config.descriptor_dim {
            return Err(Error::BadCheckpoint("descriptor length disagrees with config".into()));
        }
        Ok(())
    }
}
