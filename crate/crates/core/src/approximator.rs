//! Dense feed-forward approximator with optional residual blocks.
//!
//! The network is stored as one flat parameter vector plus an offset table,
//! so optimizers and checkpoints only ever see `&[f64]`. Layout:
//!
//! ```text
//! x -> relu(W0 x + b0)                      (width hidden[0])
//!   -> [h + W2 relu(W1 h + b1) + b2] * R    (residual blocks at hidden[0])
//!   -> relu(Wk h + bk) for hidden[1..]
//!   -> W_out h + b_out                      (zero-initialized)
//! ```
//!
//! Gradients are computed by explicit reverse-mode passes, both with respect
//! to the parameters and to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::matrix::Inventory;
use crate::pricing::OptionGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetTopology {
    pub hidden: Vec<usize>,
    pub residual_blocks: usize,
}

impl Default for NetTopology {
    fn default() -> Self {
        Self { hidden: vec![64, 64], residual_blocks: 2 }
    }
}

impl NetTopology {
    /// The wide variant: a 1024-unit lifting layer, two residual blocks and four linear layers.
    pub fn wide() -> Self {
        Self { hidden: vec![1024, 1024, 1024, 1024], residual_blocks: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Validation("net.hidden must be a non-empty list of positive widths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Linear {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

impl Linear {
    fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn apply(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &params[self.w_off..self.w_off + self.n_in * self.n_out];
        let b = &params[self.b_off..self.b_off + self.n_out];
        out.extend(
            w.chunks_exact(self.n_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()),
        );
    }

    /// Accumulates `scale * dL/dW, dL/db` into `grad` and returns `dL/dx`.
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], scale: f64) -> Vec<f64> {
        let w = &params[self.w_off..self.w_off + self.n_in * self.n_out];
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut grad[self.w_off + o * self.n_in..self.w_off + (o + 1) * self.n_in];
            let sg = scale * g;
            for ((gw, &xi), (&wi, dxi)) in grow.iter_mut().zip(x).zip(row.iter().zip(dx.iter_mut())) {
                *gw += sg * xi;
                *dxi += g * wi;
            }
            grad[self.b_off + o] += sg;
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Block {
    Dense { layer: usize, relu: bool },
    Residual { first: usize, second: usize },
}

/// Flat parameters with the layer metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorParams {
    pub topology: NetTopology,
    pub in_dim: usize,
    pub out_dim: usize,
    linears: Vec<Linear>,
    blocks: Vec<Block>,
    pub params: Vec<f64>,
}

enum BlockCache {
    Dense { input: Vec<f64>, pre: Vec<f64> },
    Residual { input: Vec<f64>, pre: Vec<f64>, hidden: Vec<f64> },
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pub output: Vec<f64>,
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl ApproximatorParams {
    /// Builds the network with all parameters set to zero.
    pub fn zeros(topology: &NetTopology, in_dim: usize, out_dim: usize) -> Result<Self> {
        topology.validate()?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("network input and output sizes must be positive".into()));
        }
        let mut linears = Vec::new();
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |n_in: usize, n_out: usize| {
            let l = Linear { n_in, n_out, w_off: offset, b_off: offset + n_in * n_out };
            offset += l.n_params();
            linears.push(l);
            linears.len() - 1
        };
        let w0 = topology.hidden[0];
        blocks.push(Block::Dense { layer: push(in_dim, w0), relu: true });
        for _ in 0..topology.residual_blocks {
            let first = push(w0, w0);
            let second = push(w0, w0);
            blocks.push(Block::Residual { first, second });
        }
        let mut width = w0;
        for &h in &topology.hidden[1..] {
            blocks.push(Block::Dense { layer: push(width, h), relu: true });
            width = h;
        }
        blocks.push(Block::Dense { layer: push(width, out_dim), relu: false });
        Ok(Self { topology: topology.clone(), in_dim, out_dim, linears, blocks, params: vec![0.0; offset] })
    }

    /// Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, zero output layer.
    pub fn init<R: Rng + ?Sized>(topology: &NetTopology, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(topology, in_dim, out_dim)?;
        let last = net.linears.len() - 1;
        for l in &net.linears[..last] {
            let bound = (6.0 / (l.n_in + l.n_out) as f64).sqrt();
            for w in &mut net.params[l.w_off..l.b_off] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// `(in, out)` for every linear map, in parameter order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.linears.iter().map(|l| (l.n_in, l.n_out)).collect()
    }

    /// Parameter offsets `(weights, biases)` for every linear map.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        self.linears.iter().map(|l| (l.w_off, l.b_off)).collect()
    }

    /// Output-layer parameter range, weights then biases.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let l = self.linears.last().expect("at least one layer");
        l.w_off..l.b_off + l.n_out
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        shape_check("network input", self.in_dim, x.len())?;
        let mut h = x.to_vec();
        let mut buf = Vec::new();
        let mut buf2 = Vec::new();
        for block in &self.blocks {
            match *block {
                Block::Dense { layer, relu: act } => {
                    self.linears[layer].apply(&self.params, &h, &mut buf);
                    if act {
                        relu(&mut buf);
                    }
                    std::mem::swap(&mut h, &mut buf);
                }
                Block::Residual { first, second } => {
                    self.linears[first].apply(&self.params, &h, &mut buf);
                    relu(&mut buf);
                    self.linears[second].apply(&self.params, &buf, &mut buf2);
                    for (a, b) in h.iter_mut().zip(&buf2) {
                        *a += b;
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        shape_check("network input", self.in_dim, x.len())?;
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            match *block {
                Block::Dense { layer, relu: act } => {
                    let mut pre = Vec::new();
                    self.linears[layer].apply(&self.params, &h, &mut pre);
                    let mut out = pre.clone();
                    if act {
                        relu(&mut out);
                    }
                    caches.push(BlockCache::Dense { input: std::mem::replace(&mut h, out), pre });
                }
                Block::Residual { first, second } => {
                    let mut pre = Vec::new();
                    self.linears[first].apply(&self.params, &h, &mut pre);
                    let mut hidden = pre.clone();
                    relu(&mut hidden);
                    let mut f = Vec::new();
                    self.linears[second].apply(&self.params, &hidden, &mut f);
                    let out: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
                    caches.push(BlockCache::Residual { input: std::mem::replace(&mut h, out), pre, hidden });
                }
            }
        }
        Ok(ForwardCache { blocks: caches, output: h })
    }

    /// Reverse pass: adds `scale * d<upstream, f(x)>/dparams` into `grad` and
    /// returns `d<upstream, f(x)>/dx`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64], scale: f64) -> Result<Vec<f64>> {
        shape_check("upstream cotangent", self.out_dim, upstream.len())?;
        shape_check("gradient buffer", self.params.len(), grad.len())?;
        let mut dh = upstream.to_vec();
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            match (*block, bc) {
                (Block::Dense { layer, relu: act }, BlockCache::Dense { input, pre }) => {
                    if act {
                        for (d, p) in dh.iter_mut().zip(pre) {
                            if *p <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    dh = self.linears[layer].backward(&self.params, input, &dh, grad, scale);
                }
                (Block::Residual { first, second }, BlockCache::Residual { input, pre, hidden }) => {
                    let mut dhidden = self.linears[second].backward(&self.params, hidden, &dh, grad, scale);
                    for (d, p) in dhidden.iter_mut().zip(pre) {
                        if *p <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    let dinput = self.linears[first].backward(&self.params, input, &dhidden, grad, scale);
                    for (a, b) in dh.iter_mut().zip(dinput) {
                        *a += b;
                    }
                }
                _ => unreachable!("cache built from the same block list"),
            }
        }
        Ok(dh)
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the flat parameters.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, upstream, &mut grad, 1.0)?;
        Ok(grad)
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the input.
    pub fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x)?;
        let mut scratch = vec![0.0; self.params.len()];
        self.backward(&cache, upstream, &mut scratch, 0.0)
    }

    /// Scalar output for single-output nets.
    pub fn scalar(&self, x: &[f64]) -> Result<f64> {
        shape_check("scalar network output", 1, self.out_dim)?;
        Ok(self.forward(x)?[0])
    }

    /// Adds `coef * dV/dparams` at `x` into `grad`, returning V(x).
    pub fn accumulate_scalar_grad(&self, x: &[f64], coef: f64, grad: &mut [f64]) -> Result<f64> {
        let cache = self.forward_cached(x)?;
        self.backward(&cache, &[1.0], grad, coef)?;
        Ok(cache.output[0])
    }
}

fn ensure_finite(grad: &[f64]) -> Result<()> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {i} is {}", grad[i])));
    }
    Ok(())
}

fn clip_factor(grad: &[f64], clip: Option<f64>) -> f64 {
    match clip {
        Some(max_norm) => {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

/// `params -= lr * grad`, with the gradient rescaled to norm `clip` when it is larger.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64, clip: Option<f64>) -> Result<()> {
    shape_check("sgd gradient", params.len(), grad.len())?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate {lr} must be non-negative")));
    }
    ensure_finite(grad)?;
    let step = lr * clip_factor(grad, clip);
    if step == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= step * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, clip: Option<f64>) -> Result<()> {
        shape_check("adam gradient", params.len(), grad.len())?;
        ensure_finite(grad)?;
        if lr == 0.0 {
            return Ok(());
        }
        let scale = clip_factor(grad, clip);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g * scale;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Plain SGD or Adam behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(n_params)),
        }
    }

    /// Descent step `params -= lr * direction(grad)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, clip: Option<f64>) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grad, lr, clip),
            Optimizer::Adam(adam) => adam.step(params, grad, lr, clip),
        }
    }
}

/// How `(t, q[, S])` is turned into a network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEncoding {
    pub horizon: f64,
    pub q_scale: f64,
    #[serde(default)]
    pub include_s: bool,
    #[serde(default = "default_s0")]
    pub s0: f64,
}

fn default_s0() -> f64 {
    100.0
}

impl Default for StateEncoding {
    fn default() -> Self {
        Self { horizon: 1.0, q_scale: 5.0, include_s: false, s0: 100.0 }
    }
}

impl StateEncoding {
    pub fn len(&self, n_options: usize) -> usize {
        1 + n_options + usize::from(self.include_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.q_scale > 0.0 && self.s0 > 0.0) {
            return Err(Error::Validation("encoding horizon, q_scale and s0 must be positive".into()));
        }
        Ok(())
    }

    pub fn encode(&self, t: f64, q: &Inventory, s: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len(q.len()));
        self.encode_into(t, q, s, &mut x);
        x
    }

    pub fn encode_into(&self, t: f64, q: &Inventory, s: f64, x: &mut Vec<f64>) {
        x.clear();
        x.push(t / self.horizon);
        x.extend(q.as_slice().iter().map(|&v| v as f64 / self.q_scale));
        if self.include_s {
            x.push(s / self.s0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    Value,
    PolicyMean,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk network record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub role: NetRole,
    pub layer_shapes: Vec<(usize, usize)>,
    pub encoding: StateEncoding,
    pub grid_fingerprint: String,
    pub net: ApproximatorParams,
}

impl Checkpoint {
    pub fn new(role: NetRole, net: &ApproximatorParams, encoding: StateEncoding, grid: &OptionGrid) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            role,
            layer_shapes: net.layer_shapes(),
            encoding,
            grid_fingerprint: grid.fingerprint(),
            net: net.clone(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads a checkpoint and checks it was trained on `grid`.
    pub fn load(path: &std::path::Path, grid: &OptionGrid) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("unsupported checkpoint version {}", ck.version)));
        }
        let fp = grid.fingerprint();
        if ck.grid_fingerprint != fp {
            return Err(Error::Fingerprint { checkpoint: ck.grid_fingerprint, config: fp });
        }
        if ck.layer_shapes != ck.net.layer_shapes()
            || ck.net.params.len() != ck.net.linears.iter().map(Linear::n_params).sum::<usize>()
        {
            return Err(Error::Validation("checkpoint layer table does not match its parameters".into()));
        }
        Ok(ck)
    }
}
