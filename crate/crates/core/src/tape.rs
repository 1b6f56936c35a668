//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors in NCHW layout, with just the operations the network needs.
//!
//! Every operation appends a node holding its output value. [`Graph::backward`]
//! walks the nodes in reverse creation order, so gradients are accumulated in
//! a fixed order and results are bit-reproducible.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got {:?}", self.shape),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Batch norm with frozen statistics: an affine map per channel.
    BatchNormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    NormalizeChannels {
        x: Var,
        norms: Vec<f64>,
    },
    CostVolume {
        x: Var,
        norms: Vec<f64>,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var[v.0].as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

const NORM_EPS: f64 = 1e-12;
/// Guard added to the product of norms in the cost volume denominator.
pub const COST_VOLUME_EPS: f64 = 1e-8;

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            conv2d_forward(xv, wv, b.map(|b| self.value(b)), stride, pad)
        };
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Batch normalization over `(N, H, W)` per channel using batch statistics.
    /// Returns the output and the batch `(mean, unbiased variance)`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let m = n * h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                s += xv.data[base..base + h * w].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut q = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                q += xv.data[base..base + h * w].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = q / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = affine_normalize(xv, &mean, &inv_std, self.value(gamma), self.value(beta));
        let unbiased = var
            .iter()
            .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
            .collect();
        let node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (node, mean, unbiased)
    }

    /// Batch normalization with given running statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = affine_normalize(self.value(x), mean, &inv_std, self.value(gamma), self.value(beta));
        self.push(
            out,
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| v.max(0.0)).collect());
        self.push(out, Op::Relu(x))
    }

    /// 2x2 max pooling with stride 2 (floor on odd sizes).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv.data[idx] > xv.data[best] {
                            best = idx;
                        }
                    }
                    let o = (nc * ho + i) * wo + j;
                    out[o] = xv.data[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out);
        self.push(t, Op::MaxPool2 { x, argmax })
    }

    /// Unit-normalize the channel vector at every spatial location.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = xv.data.clone();
        let mut norms = vec![0.0; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let base = ni * c * hw + p;
                let norm = (0..c).map(|k| xv.data[base + k * hw].powi(2)).sum::<f64>().sqrt();
                norms[ni * hw + p] = norm;
                let d = norm.max(NORM_EPS);
                for k in 0..c {
                    out[base + k * hw] /= d;
                }
            }
        }
        let t = Tensor::new(xv.shape.clone(), out);
        self.push(t, Op::NormalizeChannels { x, norms })
    }

    /// Cosine-similarity cost volume between the first and second half of a
    /// `[2B, C, h, w]` batch. Output `[B, 1, L, L]` with `L = h * w`, entry
    /// `(i, j)` comparing location `i` of stream one with `j` of stream two.
    pub fn cost_volume(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n2, c, h, w) = xv.dims4();
        assert!(n2 % 2 == 0, "cost volume needs an even batch");
        let b = n2 / 2;
        let l = h * w;
        let norms: Vec<f64> = (0..n2)
            .flat_map(|ni| {
                (0..l).map(move |p| {
                    (0..c)
                        .map(|k| xv.data[(ni * c + k) * l + p].powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
            })
            .collect();
        let mut out = vec![0.0; b * l * l];
        let mut dots = vec![0.0; l * l];
        for bi in 0..b {
            let x1 = &xv.data[bi * c * l..(bi + 1) * c * l];
            let x2 = &xv.data[(b + bi) * c * l..(b + bi + 1) * c * l];
            // dots = x1^T x2 ; x1, x2 are C x L row-major
            gemm(l, c, l, 1.0, x1, (1, l), x2, (l, 1), 0.0, &mut dots, (l, 1));
            for i in 0..l {
                let n1 = norms[bi * l + i];
                for j in 0..l {
                    let n2v = norms[(b + bi) * l + j];
                    out[(bi * l + i) * l + j] = dots[i * l + j] / (n1 * n2v + COST_VOLUME_EPS);
                }
            }
        }
        let t = Tensor::new(vec![b, 1, l, l], out);
        self.push(t, Op::CostVolume { x, norms })
    }

    /// Adaptive average pooling of the last two dims to `out_h x out_w`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let rows = pool_windows(h, out_h);
        let cols = pool_windows(w, out_w);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for nc in 0..n * c {
            let base = nc * h * w;
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += xv.data[base + r * w + c0..base + r * w + c1].iter().sum::<f64>();
                    }
                    out[(nc * out_h + i) * out_w + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let t = Tensor::new(vec![n, c, out_h, out_w], out);
        self.push(t, Op::AdaptiveAvgPool { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(shape, xv.data.clone());
        self.push(t, Op::Reshape(x))
    }

    /// `x [N, in] -> x W^T + b` with `W [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = (xv.shape[0], xv.shape[1]);
        let m = wv.shape[0];
        assert_eq!(wv.shape[1], k, "linear input width");
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&bv.data);
        }
        gemm(n, k, m, 1.0, &xv.data, (k, 1), &wv.data, (1, k), 1.0, &mut out, (m, 1));
        let t = Tensor::new(vec![n, m], out);
        self.push(t, Op::Linear { x, w, b })
    }

    /// Inverted dropout; the identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let len = self.value(x).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape.clone(),
            xv.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.push(out, Op::Dropout { x, mask })
    }

    /// Back-propagate the given output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape, self.value(v).shape, "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape.clone()));
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g);
                    }
                    Some(acc) => Tensor::add_assign(acc, &g),
                }
            }
        }
        Gradients {
            by_var: grads,
            params,
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gamma_v = self.value(*gamma);
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in base..base + hw {
                            gg[ci] += g.data[p] * xhat[p];
                            gbeta[ci] += g.data[p];
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let k = gamma_v.data[ci] * inv_std[ci] / m;
                        for p in base..base + hw {
                            gx[p] = k * (m * g.data[p] - gbeta[ci] - xhat[p] * gg[ci]);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape.clone(), gx));
                accumulate(grads, *gamma, Tensor::new(vec![c], gg));
                accumulate(grads, *beta, Tensor::new(vec![c], gbeta));
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gamma_v = self.value(*gamma);
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let k = gamma_v.data[ci] * inv_std[ci];
                        for p in base..base + hw {
                            gg[ci] += g.data[p] * xhat[p];
                            gbeta[ci] += g.data[p];
                            gx[p] = k * g.data[p];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape.clone(), gx));
                accumulate(grads, *gamma, Tensor::new(vec![c], gg));
                accumulate(grads, *beta, Tensor::new(vec![c], gbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape.clone(), gx));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape.clone());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data[src] += g.data[o];
                }
                accumulate(grads, *x, gx);
            }
            Op::NormalizeChannels { x, norms } => {
                let y = &self.nodes[idx].value;
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let mut gx = vec![0.0; g.len()];
                for ni in 0..n {
                    for p in 0..hw {
                        let base = ni * c * hw + p;
                        let norm = norms[ni * hw + p];
                        if norm > NORM_EPS {
                            let dot: f64 = (0..c).map(|k| y.data[base + k * hw] * g.data[base + k * hw]).sum();
                            for k in 0..c {
                                let i = base + k * hw;
                                gx[i] = (g.data[i] - y.data[i] * dot) / norm;
                            }
                        } else {
                            for k in 0..c {
                                let i = base + k * hw;
                                gx[i] = g.data[i] / NORM_EPS;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape.clone(), gx));
            }
            Op::CostVolume { x, norms } => {
                let xv = self.value(*x);
                let (n2, c, h, w) = xv.dims4();
                let b = n2 / 2;
                let l = h * w;
                let mut gx = vec![0.0; xv.len()];
                let mut dots = vec![0.0; l * l];
                let mut a = vec![0.0; l * l];
                for bi in 0..b {
                    let o1 = bi * c * l;
                    let o2 = (b + bi) * c * l;
                    let x1 = &xv.data[o1..o1 + c * l];
                    let x2 = &xv.data[o2..o2 + c * l];
                    gemm(l, c, l, 1.0, x1, (1, l), x2, (l, 1), 0.0, &mut dots, (l, 1));
                    let n1 = &norms[bi * l..(bi + 1) * l];
                    let n2v = &norms[(b + bi) * l..(b + bi + 1) * l];
                    let gcv = &g.data[bi * l * l..(bi + 1) * l * l];
                    // A_ij = G_ij / D_ij ; B_ij = G_ij dot_ij / D_ij^2
                    let mut r1 = vec![0.0; l]; // sum_j B_ij n2_j / n1_i
                    let mut r2 = vec![0.0; l]; // sum_i B_ij n1_i / n2_j
                    for i in 0..l {
                        for j in 0..l {
                            let d = n1[i] * n2v[j] + COST_VOLUME_EPS;
                            let gij = gcv[i * l + j];
                            a[i * l + j] = gij / d;
                            let bij = gij * dots[i * l + j] / (d * d);
                            if n1[i] > 0.0 {
                                r1[i] += bij * n2v[j] / n1[i];
                            }
                            if n2v[j] > 0.0 {
                                r2[j] += bij * n1[i] / n2v[j];
                            }
                        }
                    }
                    // dx1[k, i] = sum_j x2[k, j] A_ij - x1[k, i] r1_i
                    let (g1, rest) = gx.split_at_mut(o2);
                    let g1 = &mut g1[o1..o1 + c * l];
                    let g2 = &mut rest[..c * l];
                    gemm(c, l, l, 1.0, x2, (l, 1), &a, (1, l), 1.0, g1, (l, 1));
                    gemm(c, l, l, 1.0, x1, (l, 1), &a, (l, 1), 1.0, g2, (l, 1));
                    for k in 0..c {
                        for i in 0..l {
                            g1[k * l + i] -= x1[k * l + i] * r1[i];
                            g2[k * l + i] -= x2[k * l + i] * r2[i];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape.clone(), gx));
            }
            Op::AdaptiveAvgPool { x } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let (_, _, oh, ow) = g.dims4();
                let rows = pool_windows(h, oh);
                let cols = pool_windows(w, ow);
                let mut gx = vec![0.0; xv.len()];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for (i, &(r0, r1)) in rows.iter().enumerate() {
                        for (j, &(c0, c1)) in cols.iter().enumerate() {
                            let v = g.data[(nc * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    gx[base + r * w + cc] += v;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape.clone(), gx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape.clone();
                accumulate(grads, *x, Tensor::new(shape, g.data.clone()));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k) = (xv.shape[0], xv.shape[1]);
                let m = wv.shape[0];
                let mut gx = vec![0.0; n * k];
                gemm(n, m, k, 1.0, &g.data, (m, 1), &wv.data, (k, 1), 0.0, &mut gx, (k, 1));
                let mut gw = vec![0.0; m * k];
                gemm(m, n, k, 1.0, &g.data, (1, m), &xv.data, (k, 1), 0.0, &mut gw, (k, 1));
                let mut gb = vec![0.0; m];
                for row in g.data.chunks(m) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, k], gx));
                accumulate(grads, *w, Tensor::new(vec![m, k], gw));
                accumulate(grads, *b, Tensor::new(vec![m], gb));
            }
            Op::Dropout { x, mask } => {
                let gx = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape.clone(), gx));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn affine_normalize(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for p in base..base + hw {
                let v = (x.data[p] - mean[ci]) * inv_std[ci];
                xhat[p] = v;
                out[p] = gamma.data[ci] * v + beta.data[ci];
            }
        }
    }
    (Tensor::new(x.shape.clone(), out), xhat)
}

/// Half-open input windows of adaptive pooling: `[floor(i*n/m), ceil((i+1)*n/m))`.
pub fn pool_windows(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .map(|i| {
            let start = i * n / m;
            let end = ((i + 1) * n).div_ceil(m);
            (start, end.max(start + 1))
        })
        .collect()
}

/// `C = alpha * A B + beta * C` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_idx = |rows: usize, cols: usize, s: (usize, usize)| (rows - 1) * s.0 + (cols - 1) * s.1;
    if k > 0 {
        assert!(max_idx(m, k, a_strides) < a.len());
        assert!(max_idx(k, n, b_strides) < b.len());
    }
    assert!(max_idx(m, n, c_strides) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let dst = &mut out[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, x: &mut [f64]) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, ci, k, k2) = w.dims4();
    assert_eq!(ci, c, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let ckk = c * k * k;
    let mut out = vec![0.0; n * o * ho * wo];
    let mut cols = vec![0.0; if is_pointwise(k, stride, pad) { 0 } else { ckk * ho * wo }];
    for ni in 0..n {
        let xi = &x.data[ni * c * h * wd..(ni + 1) * c * h * wd];
        let col_ref: &[f64] = if is_pointwise(k, stride, pad) {
            xi
        } else {
            im2col(xi, c, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        let oi = &mut out[ni * o * ho * wo..(ni + 1) * o * ho * wo];
        if let Some(b) = b {
            for (oc, row) in oi.chunks_mut(ho * wo).enumerate() {
                row.fill(b.data[oc]);
            }
        }
        gemm(o, ckk, ho * wo, 1.0, &w.data, (ckk, 1), col_ref, (ho * wo, 1), 1.0, oi, (ho * wo, 1));
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    let mut cols = vec![0.0; if pointwise { 0 } else { ckk * ho * wo }];
    let mut gcols = vec![0.0; if pointwise { 0 } else { ckk * ho * wo }];
    for ni in 0..n {
        let xi = &x.data[ni * c * h * wd..(ni + 1) * c * h * wd];
        let gi = &g.data[ni * o * ho * wo..(ni + 1) * o * ho * wo];
        for (oc, row) in gi.chunks(ho * wo).enumerate() {
            gb[oc] += row.iter().sum::<f64>();
        }
        let gxi = &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd];
        if pointwise {
            gemm(o, ho * wo, ckk, 1.0, gi, (ho * wo, 1), xi, (1, ho * wo), 1.0, &mut gw, (ckk, 1));
            gemm(ckk, o, ho * wo, 1.0, &w.data, (1, ckk), gi, (ho * wo, 1), 0.0, gxi, (ho * wo, 1));
        } else {
            im2col(xi, c, h, wd, k, stride, pad, &mut cols);
            gemm(o, ho * wo, ckk, 1.0, gi, (ho * wo, 1), &cols, (1, ho * wo), 1.0, &mut gw, (ckk, 1));
            gemm(ckk, o, ho * wo, 1.0, &w.data, (1, ckk), gi, (ho * wo, 1), 0.0, &mut gcols, (ho * wo, 1));
            col2im(&gcols, c, h, wd, k, stride, pad, gxi);
        }
    }
    (
        Tensor::new(x.shape.clone(), gx),
        Tensor::new(w.shape.clone(), gw),
        Tensor::new(vec![o], gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite-difference check of `sum(out * probe)` w.r.t. one input.
    fn check_grad(
        inputs: Vec<Tensor>,
        which: usize,
        build: impl Fn(&mut Graph, &[Var]) -> Var,
    ) -> f64 {
        let run = |inputs: &[Tensor]| -> (f64, Tensor, Tensor) {
            let mut g = Graph::new(Mode::Train, 0);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            let probe = rand_tensor(g.value(out).shape.clone(), 99);
            let val: f64 = g.value(out).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
            let grads = g.backward(vec![(out, probe.clone())]);
            let gi = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape.clone()));
            (val, gi, probe)
        };
        let (_, analytic, _) = run(&inputs);
        let eps = 1e-6;
        let mut fd = vec![0.0; inputs[which].len()];
        for i in 0..inputs[which].len() {
            let mut plus = inputs.clone();
            plus[which].data[i] += eps;
            let mut minus = inputs.clone();
            minus[which].data[i] -= eps;
            fd[i] = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
        }
        let num: f64 = fd.iter().zip(&analytic.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(analytic.data.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
        num / den
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let x = rand_tensor(vec![2, 3, 7, 6], 1);
        let w = rand_tensor(vec![4, 3, 3, 3], 2);
        let b = rand_tensor(vec![4], 3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let out = conv2d_forward(&x, &w, Some(&b), stride, pad);
            let (_, _, ho, wo) = out.dims4();
            for n in 0..2 {
                for o in 0..4 {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut s = b.data[o];
                            for c in 0..3 {
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let ii = (i * stride + ki) as isize - pad as isize;
                                        let jj = (j * stride + kj) as isize - pad as isize;
                                        if ii >= 0 && jj >= 0 && ii < 7 && jj < 6 {
                                            s += x.data[((n * 3 + c) * 7 + ii as usize) * 6 + jj as usize]
                                                * w.data[((o * 3 + c) * 3 + ki) * 3 + kj];
                                        }
                                    }
                                }
                            }
                            let got = out.data[((n * 4 + o) * ho + i) * wo + j];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = rand_tensor(vec![2, 2, 5, 6], 4);
            let w = rand_tensor(vec![3, 2, k, k], 5);
            let b = rand_tensor(vec![3], 6);
            for which in 0..3 {
                let err = check_grad(vec![x.clone(), w.clone(), b.clone()], which, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
                assert!(err < 1e-7, "k={k} s={stride} input {which}: {err}");
            }
        }
    }

    #[test]
    fn batch_norm_gradients_and_stats() {
        let x = rand_tensor(vec![3, 2, 3, 3], 7);
        let gamma = rand_tensor(vec![2], 8);
        let beta = rand_tensor(vec![2], 9);
        for which in 0..3 {
            let err = check_grad(vec![x.clone(), gamma.clone(), beta.clone()], which, |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5).0);
            assert!(err < 1e-6, "input {which}: {err}");
        }
        let mut g = Graph::new(Mode::Train, 0);
        let (xv, gv, bv) = (g.input(x.clone()), g.input(Tensor::filled(vec![2], 1.0)), g.input(Tensor::zeros(vec![2])));
        let (y, mean, _) = g.batch_norm(xv, gv, bv, 0.0);
        let y = g.value(y);
        let m: f64 = (0..3).map(|n| y.data[n * 18..n * 18 + 9].iter().sum::<f64>()).sum();
        assert!(m.abs() < 1e-12);
        assert_eq!(mean.len(), 2);
    }

    #[test]
    fn frozen_batch_norm_gradients() {
        let x = rand_tensor(vec![2, 2, 2, 3], 17);
        let gamma = rand_tensor(vec![2], 18);
        let beta = rand_tensor(vec![2], 19);
        for which in 0..3 {
            let err = check_grad(vec![x.clone(), gamma.clone(), beta.clone()], which, |g, v| {
                g.batch_norm_frozen(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
            });
            assert!(err < 1e-7, "input {which}: {err}");
        }
    }

    #[test]
    fn pooling_relu_reshape_gradients() {
        let x = rand_tensor(vec![2, 2, 5, 4], 10);
        assert!(check_grad(vec![x.clone()], 0, |g, v| g.max_pool2(v[0])) < 1e-7);
        assert!(check_grad(vec![x.clone()], 0, |g, v| g.relu(v[0])) < 1e-7);
        assert!(check_grad(vec![x.clone()], 0, |g, v| g.adaptive_avg_pool(v[0], 3, 7)) < 1e-7);
        assert!(check_grad(vec![x.clone()], 0, |g, v| g.reshape(v[0], vec![2, 40])) < 1e-7);
    }

    #[test]
    fn normalize_channels_gradient_and_norm() {
        let x = rand_tensor(vec![2, 5, 3, 2], 11);
        assert!(check_grad(vec![x.clone()], 0, |g, v| g.normalize_channels(v[0])) < 1e-6);
        let mut g = Graph::new(Mode::Eval, 0);
        let v = g.input(x);
        let y = g.normalize_channels(v);
        let y = g.value(y);
        for n in 0..2 {
            for p in 0..6 {
                let s: f64 = (0..5).map(|k| y.data[n * 30 + k * 6 + p].powi(2)).sum();
                assert!((s.sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cost_volume_gradient() {
        let x = rand_tensor(vec![4, 3, 2, 3], 12);
        assert!(check_grad(vec![x], 0, |g, v| g.cost_volume(v[0])) < 1e-6);
    }

    #[test]
    fn linear_and_dropout_gradients() {
        let x = rand_tensor(vec![3, 4], 13);
        let w = rand_tensor(vec![5, 4], 14);
        let b = rand_tensor(vec![5], 15);
        for which in 0..3 {
            assert!(check_grad(vec![x.clone(), w.clone(), b.clone()], which, |g, v| g.linear(v[0], v[1], v[2])) < 1e-7);
        }
        assert!(check_grad(vec![x.clone()], 0, |g, v| g.dropout(v[0], 0.5)) < 1e-7);
        let mut g = Graph::new(Mode::Eval, 0);
        let v = g.input(x);
        assert_eq!(g.dropout(v, 0.5), v);
    }

    #[test]
    fn pool_windows_cover_input() {
        assert_eq!(pool_windows(64, 16)[1], (4, 8));
        assert_eq!(pool_windows(1, 4), vec![(0, 1); 4]);
        let w = pool_windows(10, 4);
        assert_eq!(w.first().unwrap().0, 0);
        assert_eq!(w.last().unwrap().1, 10);
    }

    #[test]
    fn shared_parameter_gradients_are_summed() {
        let w = rand_tensor(vec![2, 3], 20);
        let b = Tensor::zeros(vec![2]);
        let x = rand_tensor(vec![1, 3], 21);
        let mut g = Graph::new(Mode::Train, 0);
        let xv = g.input(x);
        let w1 = g.param("w", &w);
        let w2 = g.param("w", &w);
        let bv = g.param("b", &b);
        let y1 = g.linear(xv, w1, bv);
        let y2 = g.linear(xv, w2, bv);
        let grads = g.backward(vec![(y1, Tensor::filled(vec![1, 2], 1.0)), (y2, Tensor::filled(vec![1, 2], 1.0))]);
        let gw = &grads.params()["w"];
        let single = grads.get(w1).unwrap();
        for (a, b) in gw.data().iter().zip(single.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }
}
