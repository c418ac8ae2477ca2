//! Parameter storage, dense helpers and the optimizer.
//!
//! Models in this crate are small and hand-differentiated: every layer keeps
//! its parameters as named [`Param`]s holding value and gradient side by side,
//! and exposes them through [`Parameters`] for the optimizer, freezing and
//! checkpointing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 64-bit FNV-1a. Used wherever a hash must be stable across platforms and
/// releases (token bucketing, per-parameter seeds).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for a named stream under a run seed.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()).rotate_left(17))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Sentence embedder weights (fine-tuned with the smaller learning rate).
    Embedder,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub frozen: bool,
    pub group: ParamGroup,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize], group: ParamGroup) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            frozen: false,
            group,
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    /// Uniform(−scale, scale) entries drawn from a stream keyed by the
    /// parameter name, so initialization does not depend on which other
    /// parameters exist.
    pub fn uniform(name: impl Into<String>, shape: &[usize], scale: f64, seed: u64, group: ParamGroup) -> Self {
        let mut p = Param::zeros(name, shape, group);
        let mut rng = named_rng(seed, &p.name);
        for v in &mut p.value {
            *v = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.value[r * c..(r + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if !p.frozen {
                n += p.len()
            }
        });
        n
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut(&mut |p| p.frozen = frozen);
    }

    /// Name → value copy of every parameter.
    fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        out
    }

    fn restore(&mut self, snap: &BTreeMap<String, Vec<f64>>) {
        self.visit_mut(&mut |p| {
            if let Some(v) = snap.get(&p.name) {
                p.value.clone_from(v);
            }
        });
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        self.visit(&mut |p| {
            tensors.insert(
                p.name.clone(),
                Tensor {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
        Checkpoint { tensors }
    }

    fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |p| match ck.tensors.get(&p.name) {
            Some(t) if t.shape == p.shape => p.value.clone_from(&t.data),
            Some(t) => {
                err.get_or_insert(Error::Shape(format!(
                    "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            None => {
                err.get_or_insert(Error::validation(format!("checkpoint lacks tensor `{}`", p.name)));
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn has_non_finite(&self) -> bool {
        let mut bad = false;
        self.visit(&mut |p| bad |= p.value.iter().any(|v| !v.is_finite()));
        bad
    }
}

impl Parameters for Param {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat named-tensor archive.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Affine map `y = W x + b` with `W` stored row-major (out × in).
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Param,
    pub bias: Param,
}

impl Affine {
    pub fn new(name: &str, input: usize, output: usize, seed: u64, group: ParamGroup) -> Self {
        let scale = 1.0 / (input.max(1) as f64).sqrt();
        Affine {
            weight: Param::uniform(format!("{name}.weight"), &[output, input], scale, seed, group),
            bias: Param::zeros(format!("{name}.bias"), &[output], group),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.cols()
    }

    pub fn output(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = matvec(&self.weight.value, self.output(), x);
        for (yi, bi) in y.iter_mut().zip(&self.bias.value) {
            *yi += bi;
        }
        y
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        if !self.weight.frozen {
            add_outer(&mut self.weight.grad, dy, x);
        }
        if !self.bias.frozen {
            for (g, d) in self.bias.grad.iter_mut().zip(dy) {
                *g += d;
            }
        }
        matvec_t(&self.weight.value, self.input(), dy)
    }
}

impl Parameters for Affine {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// `W x` for row-major `W` with `rows` rows.
pub fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Wᵀ g` for row-major `W` with `cols` columns.
pub fn matvec_t(w: &[f64], cols: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
    out
}

/// `G += a bᵀ` for row-major `G` (|a| × |b|).
pub fn add_outer(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, ar) in a.iter().enumerate() {
        if *ar == 0.0 {
            continue;
        }
        for (gv, bv) in g[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *gv += ar * bv;
        }
    }
}

pub fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_embedder: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Element-wise gradient clipping; 0 disables.
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_embedder: 2e-5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, step: 0 }
    }

    /// Applies accumulated gradients to every non-frozen parameter, then
    /// clears all gradients.
    pub fn step(&mut self, model: &mut dyn Parameters) {
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        model.visit_mut(&mut |p| {
            if p.frozen {
                p.zero_grad();
                return;
            }
            let lr = match p.group {
                ParamGroup::Embedder => c.lr_embedder,
                ParamGroup::Other => c.lr,
            };
            if c.clip > 0.0 {
                p.grad.iter_mut().for_each(|g| *g = g.clamp(-c.clip, c.clip));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in p.value.iter_mut().zip(&p.grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    if p.moment1.len() != p.value.len() {
                        p.moment1 = vec![0.0; p.value.len()];
                        p.moment2 = vec![0.0; p.value.len()];
                    }
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        p.moment1[i] = c.beta1 * p.moment1[i] + (1.0 - c.beta1) * g;
                        p.moment2[i] = c.beta2 * p.moment2[i] + (1.0 - c.beta2) * g * g;
                        let mhat = p.moment1[i] / bc1;
                        let vhat = p.moment2[i] / bc2;
                        p.value[i] -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
            p.zero_grad();
        });
    }
}
