//! Training losses and their label constructions.
//!
//! Each loss returns its value together with the gradient with respect to its
//! tensor inputs; the gradients seed the backward pass of the network graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FourPointDelta, Homography};
use crate::matching::KeypointSet;
use crate::network::{CellLogits, DescriptorGrid, CELL, CELL_CLASSES, DUSTBIN};
use crate::raster::ImageDims;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellLabelGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major labels in `0..=64`.
    pub labels: Vec<u8>,
}

impl CellLabelGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![DUSTBIN as u8; height * width],
        }
    }

    pub fn get(&self, h: usize, w: usize) -> usize {
        self.labels[h * self.width + w] as usize
    }

    /// Pixel `(row, col)` encoded by an occupied cell.
    pub fn decode(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let c = self.get(h, w);
        (c != DUSTBIN).then(|| (h * CELL + c / CELL, w * CELL + c % CELL))
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l as usize != DUSTBIN).count()
    }
}

/// Integer pixel holding a keypoint, or `None` outside the frame.
pub(crate) fn keypoint_pixel(x: f64, y: f64, dims: ImageDims) -> Option<(usize, usize)> {
    let inside = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v < n as f64;
    if !inside(x, dims.width) || !inside(y, dims.height) {
        return None;
    }
    let col = (x.round() as usize).min(dims.width - 1);
    let row = (y.round() as usize).min(dims.height - 1);
    Some((row, col))
}

/// Build the detector target: dustbin for empty cells, otherwise the in-cell
/// class `8 * (row % 8) + col % 8` of one keypoint chosen uniformly among
/// those falling in the cell.
pub fn cells_from_keypoints<R: Rng + ?Sized>(
    kps: &KeypointSet,
    dims: ImageDims,
    rng: &mut R,
) -> Result<CellLabelGrid> {
    let (hc, wc) = (dims.height / CELL, dims.width / CELL);
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); hc * wc];
    for kp in kps.iter() {
        let (row, col) = keypoint_pixel(kp.x, kp.y, dims).ok_or(Error::KeypointOutOfBounds {
            x: kp.x,
            y: kp.y,
            width: dims.width,
            height: dims.height,
        })?;
        let (h, w) = (row / CELL, col / CELL);
        if h < hc && w < wc {
            members[h * wc + w].push((row, col));
        }
    }
    let mut grid = CellLabelGrid::empty(hc, wc);
    for (i, m) in members.iter().enumerate() {
        let pick = match m.len() {
            0 => continue,
            1 => m[0],
            n => m[rng.random_range(0..n)],
        };
        grid.labels[i] = (CELL * (pick.0 % CELL) + pick.1 % CELL) as u8;
    }
    Ok(grid)
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// One weight per class; index 64 is the dustbin.
    pub class_weights: Vec<f64>,
    /// Divide by the number of cells instead of the sum of applied weights.
    pub plain_mean: bool,
    pub lambda_d: f64,
    pub m_p: f64,
    pub m_n: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: vec![1.0; CELL_CLASSES],
            plain_mean: false,
            lambda_d: 250.0,
            m_p: 1.0,
            m_n: 0.2,
            lambda: 1e-4,
            gamma: 0.01,
        }
    }
}

impl LossConfig {
    pub fn with_dustbin_weight(mut self, w: f64) -> Self {
        self.class_weights[DUSTBIN] = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.class_weights.len() != CELL_CLASSES {
            return bad("class_weights must have 65 entries");
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("class weights must be finite and non-negative");
        }
        for (v, name) in [
            (self.lambda_d, "lambda_d"),
            (self.lambda, "lambda"),
            (self.gamma, "gamma"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if !(self.m_p > self.m_n) {
            return bad("m_p must exceed m_n");
        }
        Ok(())
    }
}

/// Class-weighted cross-entropy over cells.
pub fn detector_loss(x: &CellLogits, y: &CellLabelGrid, cfg: &LossConfig) -> Result<LossGrad> {
    if (x.height, x.width) != (y.height, y.width) {
        return Err(Error::ShapeMismatch(format!(
            "logits {}x{} vs labels {}x{}",
            x.height, x.width, y.height, y.width
        )));
    }
    let hw = x.height * x.width;
    let probs = x.softmax();
    let mut value = 0.0;
    let mut norm = 0.0;
    let mut grad = vec![0.0; x.data.len()];
    for p in 0..hw {
        let t = y.labels[p] as usize;
        let w = cfg.class_weights[t];
        norm += if cfg.plain_mean { 1.0 } else { w };
        if w == 0.0 {
            continue;
        }
        // -log softmax via log-sum-exp for stability
        let max = (0..CELL_CLASSES)
            .map(|c| x.data[c * hw + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..CELL_CLASSES)
                .map(|c| (x.data[c * hw + p] - max).exp())
                .sum::<f64>()
                .ln();
        value += w * (lse - x.data[t * hw + p]);
        for c in 0..CELL_CLASSES {
            grad[c * hw + p] = w * (probs[c * hw + p] - if c == t { 1.0 } else { 0.0 });
        }
    }
    if norm == 0.0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok(LossGrad {
        value: value / norm,
        grad,
    })
}

/// Sparse cell correspondence relation: `rows[i]` lists the cells of image
/// two (row-major indices) related to cell `i` of image one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrespondenceMask {
    pub cells_h: usize,
    pub cells_w: usize,
    pub rows: Vec<Vec<usize>>,
}

impl CorrespondenceMask {
    pub fn len(&self) -> usize {
        self.cells_h * self.cells_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn positives(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.len()];
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                rows[j].push(i);
            }
        }
        Self { rows, ..*self }
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        self.rows
            .iter()
            .map(|r| {
                let mut d = vec![false; n];
                r.iter().for_each(|&j| d[j] = true);
                d
            })
            .collect()
    }
}

/// Center of cell `(h, w)` as `(x, y)` pixel coordinates.
pub fn cell_center(h: usize, w: usize) -> (f64, f64) {
    let half = (CELL as f64 - 1.0) / 2.0;
    ((CELL * w) as f64 + half, (CELL * h) as f64 + half)
}

/// Maximum distance between a warped cell center and a related cell center.
pub const CORRESPONDENCE_RADIUS: f64 = 4.0;

pub fn correspondence_mask(h: &Homography, dims: ImageDims) -> CorrespondenceMask {
    let (hc, wc) = (dims.height / CELL, dims.width / CELL);
    let mut rows = Vec::with_capacity(hc * wc);
    let cell = CELL as f64;
    let half = (cell - 1.0) / 2.0;
    let r = CORRESPONDENCE_RADIUS;
    for ch in 0..hc {
        for cw in 0..wc {
            let (x, y) = cell_center(ch, cw);
            let mut row = Vec::new();
            match h.apply(nalgebra::Point2::new(x, y)) {
                None => log::debug!("cell ({ch}, {cw}) maps to infinity"),
                Some(p) => {
                    let span = |v: f64, n: usize| {
                        let lo = ((v - half - r) / cell).ceil().max(0.0);
                        let hi = ((v - half + r) / cell).floor().min(n as f64 - 1.0);
                        (lo, hi)
                    };
                    let (h0, h1) = span(p.y, hc);
                    let (w0, w1) = span(p.x, wc);
                    if h0 <= h1 && w0 <= w1 {
                        for hh in h0 as usize..=h1 as usize {
                            for ww in w0 as usize..=w1 as usize {
                                let (cx, cy) = cell_center(hh, ww);
                                if ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt() <= r {
                                    row.push(hh * wc + ww);
                                }
                            }
                        }
                    }
                }
            }
            rows.push(row);
        }
    }
    CorrespondenceMask {
        cells_h: hc,
        cells_w: wc,
        rows,
    }
}

/// Descriptor hinge loss value and gradients for both grids.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorLossGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Mean over all cell pairs of
/// `lambda_d * s * max(0, m_p - d.d') + (1 - s) * max(0, d.d' - m_n)`.
pub fn descriptor_loss(
    d1: &DescriptorGrid,
    d2: &DescriptorGrid,
    s: &CorrespondenceMask,
    cfg: &LossConfig,
) -> Result<DescriptorLossGrad> {
    if (d1.dim, d1.height, d1.width) != (d2.dim, d2.height, d2.width)
        || (s.cells_h, s.cells_w) != (d1.height, d1.width)
    {
        return Err(Error::ShapeMismatch("descriptor grids and mask disagree".into()));
    }
    let n = d1.height * d1.width;
    let d = d1.dim;
    let mut dots = vec![0.0; n * n];
    crate::tape::gemm(n, d, n, 1.0, &d1.data, (1, n), &d2.data, (n, 1), 0.0, &mut dots, (n, 1));
    let scale = 1.0 / (n * n) as f64;
    let mut value = 0.0;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let pos = &s.rows[i];
        for j in 0..n {
            let dot = dots[i * n + j];
            if pos.contains(&j) {
                let h = cfg.m_p - dot;
                if h > 0.0 {
                    value += cfg.lambda_d * h;
                    g[i * n + j] = -cfg.lambda_d * scale;
                }
            } else {
                let h = dot - cfg.m_n;
                if h > 0.0 {
                    value += h;
                    g[i * n + j] = scale;
                }
            }
        }
    }
    let mut grad_a = vec![0.0; d * n];
    let mut grad_b = vec![0.0; d * n];
    // grad_a = d2 G^T, grad_b = d1 G   (descriptors stored D x N)
    crate::tape::gemm(d, n, n, 1.0, &d2.data, (n, 1), &g, (1, n), 0.0, &mut grad_a, (n, 1));
    crate::tape::gemm(d, n, n, 1.0, &d1.data, (n, 1), &g, (n, 1), 0.0, &mut grad_b, (n, 1));
    Ok(DescriptorLossGrad {
        value: value * scale,
        grad_a,
        grad_b,
    })
}

/// Sum over corners of the squared displacement error.
pub fn homography_loss(pred: &FourPointDelta, gt: &FourPointDelta) -> LossGrad {
    let (p, t) = (pred.to_flat(), gt.to_flat());
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(&t)
        .map(|(a, b)| {
            value += (a - b) * (a - b);
            2.0 * (a - b)
        })
        .collect();
    LossGrad { value, grad }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub detector: f64,
    pub detector_warped: f64,
    pub descriptor: f64,
    pub homography: f64,
}

pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    for (v, term) in [
        (parts.detector, "detector"),
        (parts.detector_warped, "detector_warped"),
        (parts.descriptor, "descriptor"),
        (parts.homography, "homography"),
    ] {
        if !v.is_finite() {
            return Err(Error::NanLoss { term });
        }
    }
    Ok(parts.detector + parts.detector_warped + cfg.lambda * parts.descriptor + cfg.gamma * parts.homography)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Keypoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn labels_for_simple_sets() {
        let dims = ImageDims::new(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = cells_from_keypoints(&KeypointSet::default(), dims, &mut rng).unwrap();
        assert!(g.labels.iter().all(|&l| l == 64));
        let kps = KeypointSet::new(vec![Keypoint::new(5.0, 3.0, 1.0)]);
        let g = cells_from_keypoints(&kps, dims, &mut rng).unwrap();
        assert_eq!(g.get(0, 0), 29);
        assert_eq!(g.occupied(), 1);
        let bad = KeypointSet::new(vec![Keypoint::new(16.0, 3.0, 1.0)]);
        assert!(matches!(
            cells_from_keypoints(&bad, dims, &mut rng),
            Err(Error::KeypointOutOfBounds { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_ln65() {
        let x = CellLogits::new(1, 1, vec![0.7; 65]).unwrap();
        for t in [0u8, 17, 64] {
            let y = CellLabelGrid {
                height: 1,
                width: 1,
                labels: vec![t],
            };
            let l = detector_loss(&x, &y, &LossConfig::default()).unwrap();
            assert!((l.value - 65f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn homography_loss_examples() {
        let z = FourPointDelta::zero();
        let one = FourPointDelta::from_flat([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let all = FourPointDelta::from_flat([3.0, 4.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]).unwrap();
        assert_eq!(homography_loss(&z, &z).value, 0.0);
        assert_eq!(homography_loss(&one, &z).value, 1.0);
        assert_eq!(homography_loss(&all, &z).value, 100.0);
    }

    #[test]
    fn identity_mask_is_diagonal_and_translation_keeps_own_cell() {
        let dims = ImageDims::new(32, 24);
        let m = correspondence_mask(&Homography::identity(), dims);
        for (i, r) in m.rows.iter().enumerate() {
            assert_eq!(r, &vec![i]);
        }
        let t = correspondence_mask(&Homography::translation(4.0, 0.0), dims);
        for h in 0..3 {
            for w in 0..4 {
                let i = h * 4 + w;
                let mut want = vec![i];
                if w + 1 < 4 {
                    want.push(i + 1);
                }
                assert_eq!(t.rows[i], want);
            }
        }
    }

    #[test]
    fn total_loss_substitution_and_nan() {
        let cfg = LossConfig {
            lambda: 0.1,
            gamma: 2.0,
            ..LossConfig::default()
        };
        let p = LossParts {
            detector: 1.0,
            detector_warped: 2.0,
            descriptor: 3.0,
            homography: 4.0,
        };
        assert!((total_loss(&p, &cfg).unwrap() - (1.0 + 2.0 + 0.3 + 8.0)).abs() < 1e-12);
        let bad = LossParts {
            descriptor: f64::NAN,
            ..p
        };
        assert!(matches!(total_loss(&bad, &cfg), Err(Error::NanLoss { term: "descriptor" })));
    }
}
