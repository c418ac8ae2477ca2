//! Sentence embedders and layer-wise freezing.

use std::any::Any;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, fnv1a, named_rng, Param, ParamGroup, Parameters};

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Opaque forward-pass record an embedder needs for its backward pass.
pub struct EmbedTrace(pub Box<dyn Any + Send + Sync>);

/// Maps one sentence's tokens to a fixed-width summary vector.
///
/// Implementations declare an ordered block structure (input side first)
/// that a [`FreezePolicy`] addresses by position.
pub trait SentenceEmbedder: Parameters + Send + Sync {
    fn dim(&self) -> usize;

    fn max_tokens(&self) -> usize;

    fn blocks(&self) -> Vec<String>;

    fn set_block_frozen(&mut self, block: usize, frozen: bool);

    fn forward(&self, tokens: &[String]) -> (Vec<f64>, EmbedTrace);

    /// Accumulates parameter gradients for one forward pass.
    fn backward(&mut self, trace: &EmbedTrace, grad: &[f64]);

    fn clone_box(&self) -> Box<dyn SentenceEmbedder>;
}

impl Clone for Box<dyn SentenceEmbedder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Embeds a sentence text, truncating to the embedder's token capacity.
pub fn embed_text(embedder: &dyn SentenceEmbedder, text: &str) -> (Vec<f64>, EmbedTrace) {
    let mut tokens = tokenize(text);
    if tokens.len() > embedder.max_tokens() {
        log::warn!(
            "sentence with {} tokens truncated to {}",
            tokens.len(),
            embedder.max_tokens()
        );
        tokens.truncate(embedder.max_tokens());
    }
    embedder.forward(&tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEmbedderConfig {
    pub dim: usize,
    pub buckets: usize,
    pub blocks: usize,
    pub max_tokens: usize,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        ToyEmbedderConfig {
            dim: 32,
            buckets: 2048,
            blocks: 2,
            max_tokens: 128,
        }
    }
}

/// Deterministic stand-in for a pretrained transformer: tokens are hashed
/// into a bucket table of pseudo-random vectors, averaged, then passed
/// through residual `x + tanh(Wx + b)` blocks.
#[derive(Clone)]
pub struct ToyEmbedder {
    config: ToyEmbedderConfig,
    table: Param,
    layers: Vec<nn::Affine>,
}

struct ToyTrace {
    buckets: Vec<usize>,
    /// Input to each block, plus the final output.
    xs: Vec<Vec<f64>>,
    /// tanh activations per block.
    acts: Vec<Vec<f64>>,
}

impl ToyEmbedder {
    pub fn new(config: ToyEmbedderConfig, seed: u64) -> Self {
        let d = config.dim;
        let table = Param::uniform("embedder.table", &[config.buckets, d], 1.0, seed, ParamGroup::Embedder);
        let layers = (0..config.blocks)
            .map(|l| {
                let mut a = nn::Affine::new(&format!("embedder.block{l}"), d, d, seed, ParamGroup::Embedder);
                let scale = 0.5 / (d as f64).sqrt();
                let mut rng = named_rng(seed, &a.weight.name);
                use rand::Rng;
                a.weight.value.iter_mut().for_each(|w| *w = rng.gen_range(-scale..=scale));
                a
            })
            .collect();
        ToyEmbedder { config, table, layers }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.config.buckets as u64) as usize
    }
}

impl Parameters for ToyEmbedder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.table);
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl SentenceEmbedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_tokens(&self) -> usize {
        self.config.max_tokens
    }

    fn blocks(&self) -> Vec<String> {
        std::iter::once("embeddings".to_string())
            .chain((0..self.layers.len()).map(|l| format!("block{l}")))
            .collect()
    }

    fn set_block_frozen(&mut self, block: usize, frozen: bool) {
        if block == 0 {
            self.table.frozen = frozen;
        } else if let Some(l) = self.layers.get_mut(block - 1) {
            l.set_frozen(frozen);
        }
    }

    fn forward(&self, tokens: &[String]) -> (Vec<f64>, EmbedTrace) {
        let d = self.config.dim;
        let buckets: Vec<usize> = tokens.iter().map(|t| self.bucket(t)).collect();
        let mut x = vec![0.0; d];
        if !buckets.is_empty() {
            for &b in &buckets {
                nn::add_into(&mut x, self.table.row(b));
            }
            let inv = 1.0 / buckets.len() as f64;
            x.iter_mut().for_each(|v| *v *= inv);
        }
        let mut xs = vec![x.clone()];
        let mut acts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a: Vec<f64> = layer.forward(&x).into_iter().map(f64::tanh).collect();
            x = x.iter().zip(&a).map(|(xi, ai)| xi + ai).collect();
            acts.push(a);
            xs.push(x.clone());
        }
        (x, EmbedTrace(Box::new(ToyTrace { buckets, xs, acts })))
    }

    fn backward(&mut self, trace: &EmbedTrace, grad: &[f64]) {
        let t = trace.0.downcast_ref::<ToyTrace>().expect("trace from a different embedder");
        // lowest block (0 = table, l + 1 = layer l) that still trains
        let lowest = if !self.table.frozen {
            0
        } else {
            match self.layers.iter().position(|l| !(l.weight.frozen && l.bias.frozen)) {
                Some(i) => i + 1,
                None => return,
            }
        };
        let mut g = grad.to_vec();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            if l + 1 < lowest {
                return;
            }
            let du: Vec<f64> = g.iter().zip(&t.acts[l]).map(|(gi, a)| gi * (1.0 - a * a)).collect();
            let dx = layer.backward(&t.xs[l], &du);
            nn::add_into(&mut g, &dx);
        }
        if self.table.frozen || t.buckets.is_empty() {
            return;
        }
        let d = self.config.dim;
        let inv = 1.0 / t.buckets.len() as f64;
        for &b in &t.buckets {
            for (acc, gi) in self.table.grad[b * d..(b + 1) * d].iter_mut().zip(&g) {
                *acc += gi * inv;
            }
        }
    }

    fn clone_box(&self) -> Box<dyn SentenceEmbedder> {
        Box::new(self.clone())
    }
}

/// Per-block trainable flags, ordered input → output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub blocks: Vec<String>,
    pub trainable: Vec<bool>,
}

impl FreezePolicy {
    pub fn unfreeze_all(blocks: Vec<String>) -> Self {
        let trainable = vec![true; blocks.len()];
        FreezePolicy { blocks, trainable }
    }

    pub fn freeze_all(blocks: Vec<String>) -> Self {
        let trainable = vec![false; blocks.len()];
        FreezePolicy { blocks, trainable }
    }

    /// Only the `n` blocks closest to the output stay trainable.
    pub fn unfreeze_last(blocks: Vec<String>, n: usize) -> Self {
        let cut = blocks.len().saturating_sub(n);
        let trainable = (0..blocks.len()).map(|i| i >= cut).collect();
        FreezePolicy { blocks, trainable }
    }

    pub fn trainable_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(b, _)| b.as_str())
            .collect()
    }
}

/// Declarative form used in configs: how many output-side blocks to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "blocks")]
pub enum FreezeSpec {
    UnfreezeAll,
    FreezeAll,
    UnfreezeLast(usize),
}

impl Default for FreezeSpec {
    fn default() -> Self {
        FreezeSpec::UnfreezeAll
    }
}

impl FreezeSpec {
    pub fn policy_for(self, blocks: Vec<String>) -> FreezePolicy {
        match self {
            FreezeSpec::UnfreezeAll => FreezePolicy::unfreeze_all(blocks),
            FreezeSpec::FreezeAll => FreezePolicy::freeze_all(blocks),
            FreezeSpec::UnfreezeLast(n) => FreezePolicy::unfreeze_last(blocks, n),
        }
    }
}

pub fn apply_freeze_policy(embedder: &mut dyn SentenceEmbedder, policy: &FreezePolicy) -> Result<()> {
    let blocks = embedder.blocks();
    if blocks != policy.blocks || policy.trainable.len() != blocks.len() {
        return Err(Error::validation(format!(
            "freeze policy blocks {:?} do not match embedder blocks {:?}",
            policy.blocks, blocks
        )));
    }
    for (i, &t) in policy.trainable.iter().enumerate() {
        embedder.set_block_frozen(i, !t);
    }
    Ok(())
}
