//! Seeded generator for imbalanced multitask corpora.
//!
//! Every primary sentence carries one keyword from its class's pool plus
//! shared filler tokens. Rare classes draw from large pools, so most of
//! their keywords are seen only a handful of times in the primary training
//! split. The auxiliary corpus labels sentences by which rare pool (if any)
//! their keyword comes from, giving many more examples of exactly those
//! keywords.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Labels, Split, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::named_rng;

pub const PRIMARY: &str = "primary";
pub const AUXILIARY: &str = "aux";
pub const AUX_NONE: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Relative class frequencies of the primary task, most frequent first.
    pub class_weights: Vec<f64>,
    /// Keyword pool size per primary class.
    pub pool_sizes: Vec<usize>,
    /// How many trailing (rarest) classes the auxiliary task tracks.
    pub tracked: usize,
    pub filler_vocab: usize,
    pub filler_per_sentence: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub aux_docs: usize,
    /// Share of auxiliary sentences that carry a tracked keyword.
    pub aux_positive_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            class_weights: vec![0.34, 0.26, 0.2, 0.12, 0.05, 0.03],
            pool_sizes: vec![6, 6, 6, 8, 60, 60],
            tracked: 2,
            filler_vocab: 200,
            filler_per_sentence: 3,
            min_sentences: 6,
            max_sentences: 10,
            train_docs: 50,
            dev_docs: 20,
            test_docs: 60,
            aux_docs: 150,
            aux_positive_rate: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn primary_vocabulary(&self) -> Vec<String> {
        (0..self.classes()).map(|c| format!("P{c}")).collect()
    }

    pub fn aux_vocabulary(&self) -> Vec<String> {
        let mut v = vec![AUX_NONE.to_string()];
        v.extend(self.tracked_classes().map(|c| format!("R{c}")));
        v
    }

    pub fn tracked_classes(&self) -> std::ops::Range<usize> {
        self.classes() - self.tracked..self.classes()
    }

    fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 || self.pool_sizes.len() != k || self.tracked == 0 || self.tracked >= k {
            return Err(Error::validation("synthetic config: inconsistent class settings"));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::validation("synthetic config: bad sentence range"));
        }
        Ok(())
    }
}

pub fn keyword(class: usize, i: usize) -> String {
    format!("k{class}w{i}")
}

/// Primary class whose pool a keyword token belongs to.
pub fn keyword_class(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('k')?;
    let (c, _) = rest.split_once('w')?;
    c.parse().ok()
}

/// The auxiliary labelling rule applied to any sentence text.
pub fn aux_label(text: &str, config: &SyntheticConfig) -> String {
    let tracked = config.tracked_classes();
    text.split_whitespace()
        .filter_map(keyword_class)
        .find(|c| tracked.contains(c))
        .map_or_else(|| AUX_NONE.to_string(), |c| format!("R{c}"))
}

fn sentence<R: Rng>(class: usize, config: &SyntheticConfig, rng: &mut R) -> String {
    let mut words: Vec<String> = (0..config.filler_per_sentence)
        .map(|_| format!("f{}", rng.gen_range(0..config.filler_vocab)))
        .collect();
    words.push(keyword(class, rng.gen_range(0..config.pool_sizes[class])));
    words.shuffle(rng);
    words.join(" ")
}

fn draw_class<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Primary-only corpus with train/dev/test splits.
pub fn primary_corpus(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let task = TaskSpec::new(PRIMARY, TaskKind::Multiclass, config.primary_vocabulary());
    let mut rng = named_rng(seed, "synthetic.primary");
    let mut docs = Vec::new();
    let splits = [
        (Split::Train, config.train_docs),
        (Split::Dev, config.dev_docs),
        (Split::Test, config.test_docs),
    ];
    for (split, n) in splits {
        for i in 0..n {
            let len = rng.gen_range(config.min_sentences..=config.max_sentences);
            let classes: Vec<usize> = (0..len).map(|_| draw_class(&config.class_weights, &mut rng)).collect();
            let texts: Vec<String> = classes.iter().map(|&c| sentence(c, config, &mut rng)).collect();
            let mut doc = Document::from_texts(format!("{}-{i:03}", split.as_str()), "synthetic", split, texts);
            doc.headline = Some(format!("headline {i}"));
            for (s, &c) in doc.sentences.iter_mut().zip(&classes) {
                s.labels.insert(PRIMARY.into(), Labels::Single(c));
            }
            docs.push(doc);
        }
    }
    Corpus::new(vec![task], docs)
}

/// Auxiliary-only training corpus labelled by [`aux_label`].
pub fn auxiliary_corpus(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let task = TaskSpec::new(AUXILIARY, TaskKind::Multiclass, config.aux_vocabulary());
    let mut rng = named_rng(seed, "synthetic.aux");
    let tracked: Vec<usize> = config.tracked_classes().collect();
    let untracked = &config.class_weights[..config.classes() - config.tracked];
    let mut docs = Vec::new();
    for i in 0..config.aux_docs {
        let len = rng.gen_range(config.min_sentences..=config.max_sentences);
        let texts: Vec<String> = (0..len)
            .map(|_| {
                let class = if rng.gen::<f64>() < config.aux_positive_rate {
                    tracked[rng.gen_range(0..tracked.len())]
                } else {
                    draw_class(untracked, &mut rng)
                };
                sentence(class, config, &mut rng)
            })
            .collect();
        let mut doc = Document::from_texts(format!("aux-{i:03}"), "synthetic-aux", Split::Train, texts);
        for s in &mut doc.sentences {
            let label = aux_label(&s.text, config);
            s.labels.insert(AUXILIARY.into(), Labels::Single(task.label_id(&label).unwrap()));
        }
        docs.push(doc);
    }
    Corpus::new(vec![task], docs)
}

/// Primary and auxiliary corpora merged into one multitask dataset.
pub fn multitask_corpus(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    Corpus::merge([primary_corpus(config, seed)?, auxiliary_corpus(config, seed)?])
}
