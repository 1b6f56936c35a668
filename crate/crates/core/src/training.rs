//! Joint training of the detector, descriptor and homography heads.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{make_train_sample, AlignedPair, SampleConfig, TrainSample};
use crate::error::{Error, Result};
use crate::geometry::four_point_from_matrix;
use crate::losses::{
    correspondence_mask, descriptor_loss, detector_loss, homography_loss, total_loss, LossConfig,
    LossParts,
};
use crate::matching::KeypointSet;
use crate::network::{CellLogits, DescriptorGrid, Forward, Model, CELL_CLASSES};
use crate::tape::{Mode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *pi -= c.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub optimizer: AdamConfig,
    pub sample: SampleConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            checkpoint_every: 100,
            optimizer: AdamConfig::default(),
            sample: SampleConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        self.sample.validate()?;
        self.loss.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
}

/// Forward and backward pass over a batch of samples followed by one
/// optimizer update. All samples must share the same crop size.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[TrainSample],
    loss_cfg: &LossConfig,
    step: usize,
    dropout_seed: u64,
) -> Result<StepLog> {
    let b = batch.len();
    let dims = batch[0].src.dims();
    let mut data = Vec::with_capacity(2 * b * dims.len());
    for s in batch {
        data.extend_from_slice(s.src.data());
    }
    for s in batch {
        data.extend_from_slice(s.dst.data());
    }
    let images = Tensor::new(vec![2 * b, 1, dims.height, dims.width], data);

    let (grads, parts, batch_stats) = {
        let mut fwd = Forward::new(&model.store, Mode::Train, dropout_seed, model.config.batch_norm_eps);
        let x = fwd.graph.input(images);
        let heads = model.build(&mut fwd, x, true);
        let hom = heads.homography.expect("pair batch");

        let logits = fwd.graph.value(heads.logits);
        let (h, w) = (logits.shape()[2], logits.shape()[3]);
        let cell_len = CELL_CLASSES * h * w;
        let desc = fwd.graph.value(heads.descriptors);
        let dim = desc.shape()[1];
        let desc_len = dim * h * w;
        let scale = model.output_scale();
        let inv_b = 1.0 / b as f64;

        let mut parts = LossParts::default();
        let mut g_logits = vec![0.0; logits.len()];
        let mut g_desc = vec![0.0; desc.len()];
        let mut g_hom = vec![0.0; 8 * b];
        let hom_out = fwd.graph.value(hom).data().to_vec();
        for (i, s) in batch.iter().enumerate() {
            for (side, labels) in [(i, &s.labels_src), (b + i, &s.labels_dst)] {
                let x = CellLogits::new(h, w, logits.data()[side * cell_len..(side + 1) * cell_len].to_vec())?;
                let l = detector_loss(&x, labels, loss_cfg)?;
                if side < b {
                    parts.detector += l.value * inv_b;
                } else {
                    parts.detector_warped += l.value * inv_b;
                }
                for (g, v) in g_logits[side * cell_len..(side + 1) * cell_len].iter_mut().zip(&l.grad) {
                    *g = v * inv_b;
                }
            }

            let grid = |side: usize| DescriptorGrid {
                dim,
                height: h,
                width: w,
                data: desc.data()[side * desc_len..(side + 1) * desc_len].to_vec(),
            };
            let mask = correspondence_mask(&s.h_gt, dims);
            let l = descriptor_loss(&grid(i), &grid(b + i), &mask, loss_cfg)?;
            parts.descriptor += l.value * inv_b;
            let k = loss_cfg.lambda * inv_b;
            for (g, v) in g_desc[i * desc_len..(i + 1) * desc_len].iter_mut().zip(&l.grad_a) {
                *g = k * v;
            }
            for (g, v) in g_desc[(b + i) * desc_len..(b + i + 1) * desc_len].iter_mut().zip(&l.grad_b) {
                *g = k * v;
            }

            let gt = four_point_from_matrix(&s.h_gt, dims)?;
            let mut flat = [0.0; 8];
            for (o, v) in flat.iter_mut().zip(&hom_out[8 * i..8 * i + 8]) {
                *o = v * scale;
            }
            let pred = crate::geometry::FourPointDelta::from_flat(flat)?;
            let l = homography_loss(&pred, &gt);
            parts.homography += l.value * inv_b;
            for (g, v) in g_hom[8 * i..8 * i + 8].iter_mut().zip(&l.grad) {
                *g = loss_cfg.gamma * inv_b * scale * v;
            }
        }
        total_loss(&parts, loss_cfg)?;

        let logits_shape = logits.shape().to_vec();
        let desc_shape = desc.shape().to_vec();
        let grads = fwd.graph.backward(vec![
            (heads.logits, Tensor::new(logits_shape, g_logits)),
            (heads.descriptors, Tensor::new(desc_shape, g_desc)),
            (hom, Tensor::new(vec![b, 8], g_hom)),
        ]);
        (grads.into_params(), parts, fwd.batch_stats)
    };
    adam.step(&mut model.store.params, &grads);
    model.update_running_stats(&batch_stats);
    let total = total_loss(&parts, loss_cfg)?;
    Ok(StepLog { step, parts, total })
}

/// Per-step callback: receives the log line and the updated model.
pub type StepObserver<'a> = dyn FnMut(&StepLog, &Model) -> Result<()> + 'a;

/// Train for `cfg.steps` steps. Pairs are visited in a seeded shuffled
/// order, one epoch after another; each sample draws its own crop, warp and
/// spectrum assignment from a seed derived from the run seed.
pub fn train(
    model: &mut Model,
    pairs: &[AlignedPair],
    labels: &[KeypointSet],
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut StepObserver<'_>,
) -> Result<()> {
    cfg.validate()?;
    if pairs.is_empty() || pairs.len() != labels.len() {
        return Err(Error::InvalidConfig("training needs one label set per pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut jobs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            jobs.push((order.pop().expect("refilled"), rng.random::<u64>()));
        }
        let batch = jobs
            .par_iter()
            .map(|&(i, s)| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                make_train_sample(&pairs[i], &labels[i], &cfg.sample, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let dropout_seed = rng.random::<u64>();
        let log = train_step(model, &mut adam, &batch, &cfg.loss, step + 1, dropout_seed)?;
        observer(&log, model)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let x = params["x"].data().to_vec();
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), Tensor::new(vec![2], x.iter().map(|v| 2.0 * v).collect()));
            adam.step(&mut params, &g);
        }
        assert!(params["x"].data().iter().all(|v| v.abs() < 1e-2));
    }
}
