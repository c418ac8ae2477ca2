//! Multitask training: uniform task sampling, α-weighted losses, freezing,
//! early stopping and run records.

pub mod record;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Split, TaskSpec};
use crate::encoder::{apply_freeze_policy, Encoder, EncoderConfig, FreezeSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::heads::{Head, HeadConfig};
use crate::nn::{named_rng, Optimizer, OptimizerConfig, Param, Parameters};

pub use record::{
    metrics_from_dump, EpochMetrics, HeadOutput, PredictionRow, RunConfig, RunMetrics, RunRecord,
};

/// Tolerance on `Σ α = c`.
pub const ALPHA_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeighting {
    pub alpha: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub c: f64,
}

fn one() -> f64 {
    1.0
}

impl TaskWeighting {
    pub fn new(alpha: impl IntoIterator<Item = (impl Into<String>, f64)>) -> Self {
        TaskWeighting {
            alpha: alpha.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            c: 1.0,
        }
    }

    pub fn one_hot(task: &str) -> Self {
        TaskWeighting::new([(task, 1.0)])
    }

    pub fn get(&self, task: &str) -> f64 {
        self.alpha.get(task).copied().unwrap_or(0.0)
    }

    /// Tasks with positive weight, in name order.
    pub fn active(&self) -> Vec<&str> {
        self.alpha.iter().filter(|(_, &a)| a > 0.0).map(|(t, _)| t.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((t, a)) = self.alpha.iter().find(|(_, a)| !(**a >= 0.0)) {
            return Err(Error::validation(format!("alpha for `{t}` must be non-negative, got {a}")));
        }
        let sum: f64 = self.alpha.values().sum();
        if (sum - self.c).abs() > ALPHA_SUM_TOL {
            return Err(Error::validation(format!("alpha sums to {sum}, expected {}", self.c)));
        }
        if self.active().is_empty() {
            return Err(Error::validation("no task has a positive alpha"));
        }
        Ok(())
    }
}

/// `Σ_t α_t L_t`, summed in task-name order.
pub fn joint_loss(losses: &BTreeMap<String, f64>, weighting: &TaskWeighting) -> Result<f64> {
    losses.iter().try_fold(0.0, |acc, (t, l)| {
        let a = weighting
            .alpha
            .get(t)
            .ok_or_else(|| Error::validation(format!("no weight for task `{t}`")))?;
        Ok(acc + a * l)
    })
}

/// Uniform draw over active tasks, then documents without replacement from
/// the training documents covering the drawn task.
pub struct TaskSampler {
    tasks: Vec<String>,
    pools: Vec<Vec<usize>>,
}

impl TaskSampler {
    pub fn new(corpus: &Corpus, weighting: &TaskWeighting) -> Result<Self> {
        let tasks: Vec<String> = weighting.active().into_iter().map(String::from).collect();
        if tasks.is_empty() {
            return Err(Error::validation("no task has a positive alpha"));
        }
        let mut pools = Vec::with_capacity(tasks.len());
        for t in &tasks {
            corpus.task(t)?;
            let pool: Vec<usize> = corpus
                .documents
                .iter()
                .enumerate()
                .filter(|(_, d)| d.split == Split::Train && d.covers(t))
                .map(|(i, _)| i)
                .collect();
            if pool.is_empty() {
                return Err(Error::validation(format!("task `{t}` has no training documents")));
            }
            pools.push(pool);
        }
        Ok(TaskSampler { tasks, pools })
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    /// Total training documents over active tasks.
    pub fn pool_size(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, batch_size: usize) -> (&str, Vec<usize>) {
        let t = rng.gen_range(0..self.tasks.len());
        let pool = &self.pools[t];
        let docs = sample(rng, pool.len(), batch_size.min(pool.len()))
            .into_iter()
            .map(|i| pool[i])
            .collect();
        (&self.tasks[t], docs)
    }
}

pub fn sample_step<R: Rng>(
    corpus: &Corpus,
    weighting: &TaskWeighting,
    batch_size: usize,
    rng: &mut R,
) -> Result<(String, Vec<usize>)> {
    let sampler = TaskSampler::new(corpus, weighting)?;
    let (t, docs) = sampler.sample(rng, batch_size);
    Ok((t.to_string(), docs))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Explicit head settings; tasks without an entry get a default head.
    pub heads: Vec<HeadConfig>,
}

pub struct MultitaskModel {
    pub encoder: Encoder,
    pub heads: Vec<Head>,
}

impl MultitaskModel {
    pub fn new(tasks: &[TaskSpec], config: &ModelConfig, seed: u64) -> Result<Self> {
        for h in &config.heads {
            if !tasks.iter().any(|t| t.name == h.task) {
                return Err(Error::UnknownTask(h.task.clone()));
            }
        }
        let encoder = Encoder::new(config.encoder.clone(), seed);
        let width = encoder.output_dim();
        let heads = tasks
            .iter()
            .map(|t| {
                let hc = config
                    .heads
                    .iter()
                    .find(|h| h.task == t.name)
                    .cloned()
                    .unwrap_or_else(|| HeadConfig::for_task(t));
                Head::new(hc, t, width, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultitaskModel { encoder, heads })
    }

    pub fn head(&self, task: &str) -> Result<&Head> {
        self.heads
            .iter()
            .find(|h| h.task() == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    fn head_index(&self, task: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.task() == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// Every head's output for every sentence of `doc`.
    pub fn predict_document(&self, doc: &Document, tasks: &[TaskSpec]) -> Result<Vec<BTreeMap<String, HeadOutput>>> {
        let (rows, _) = self.encoder.forward(doc)?;
        let mut out = vec![BTreeMap::new(); doc.len()];
        for head in &self.heads {
            let spec = tasks
                .iter()
                .find(|t| t.name == head.task())
                .ok_or_else(|| Error::UnknownTask(head.task().to_string()))?;
            for (slot, p) in out.iter_mut().zip(head.predict(&rows)?) {
                slot.insert(
                    head.task().to_string(),
                    HeadOutput {
                        labels: p.labels.iter().map(|&i| spec.vocabulary[i].clone()).collect(),
                        probs: p.probs,
                    },
                );
            }
        }
        Ok(out)
    }

    /// One document's weighted loss; gradients accumulate in the model.
    pub fn accumulate(&mut self, doc: &Document, task: &str, weight: f64) -> Result<f64> {
        let h = self.head_index(task)?;
        let (rows, trace) = self.encoder.forward(doc)?;
        let gold: Vec<_> = doc.sentences.iter().map(|s| s.labels.get(task)).collect();
        let (loss, d_rows) = self.heads[h].weighted_loss(&rows, &gold, weight)?;
        self.encoder.backward(&trace, &d_rows);
        Ok(loss)
    }
}

impl Parameters for MultitaskModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        for h in &self.heads {
            h.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        for h in &mut self.heads {
            h.visit_mut(f);
        }
    }
}

/// Marks the named auxiliary heads frozen. Their parameters stop updating
/// but gradients still flow through them into the shared layers.
pub fn freeze_auxiliary_heads(heads: &mut [Head], flags: &[String], primary: &str) -> Result<()> {
    for name in flags {
        if name == primary {
            return Err(Error::validation(format!("cannot freeze the primary head `{primary}`")));
        }
        let head = heads
            .iter_mut()
            .find(|h| h.task() == name)
            .ok_or_else(|| Error::UnknownTask(name.clone()))?;
        head.set_head_frozen(true);
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezeConfig {
    /// Which embedder blocks train.
    pub embedder: FreezeSpec,
    /// Freezes positional table, attention query and contextualizer.
    pub shared: bool,
    /// Auxiliary heads whose parameters stay fixed.
    pub auxiliary_heads: Vec<String>,
    /// Freezes every parameter, primary head included.
    pub all: bool,
}

pub fn apply_freeze(model: &mut MultitaskModel, freeze: &FreezeConfig, primary: &str) -> Result<()> {
    if let Some(h) = model.heads.iter().find(|h| h.task() == primary && h.config.frozen) {
        return Err(Error::validation(format!("cannot freeze the primary head `{}`", h.task())));
    }
    let blocks = model.encoder.embedder.blocks();
    apply_freeze_policy(model.encoder.embedder.as_mut(), &freeze.embedder.policy_for(blocks))?;
    model.encoder.set_shared_layers_frozen(freeze.shared);
    freeze_auxiliary_heads(&mut model.heads, &freeze.auxiliary_heads, primary)?;
    if freeze.all {
        model.set_frozen(true);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMetric {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    pub metric: StopMetric,
    /// Epochs without dev improvement before stopping; `None` never stops.
    pub patience: Option<usize>,
}

fn default_epochs() -> usize {
    3
}

fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub primary: String,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Defaults to the number of training documents over active tasks,
    /// divided by the batch size.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub freeze: FreezeConfig,
    #[serde(default)]
    pub early_stop: EarlyStop,
    #[serde(default)]
    pub execution: Execution,
}

impl TrainConfig {
    pub fn new(primary: impl Into<String>, seed: u64) -> Self {
        TrainConfig {
            primary: primary.into(),
            seed,
            epochs: default_epochs(),
            steps_per_epoch: None,
            batch_size: 1,
            optimizer: OptimizerConfig::default(),
            freeze: FreezeConfig::default(),
            early_stop: EarlyStop::default(),
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::validation("steps_per_epoch must be positive"));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: MultitaskModel,
}

/// Predictions of every head over the documents of `split`, in corpus order.
pub fn prediction_dump(
    model: &MultitaskModel,
    corpus: &Corpus,
    split: Split,
    execution: Execution,
) -> Result<Vec<PredictionRow>> {
    let docs: Vec<&Document> = corpus.documents_in(split).collect();
    let outputs = execution.map(&docs, |d| model.predict_document(d, &corpus.tasks));
    let mut rows = Vec::new();
    for (doc, out) in docs.iter().zip(outputs) {
        for (s, predictions) in doc.sentences.iter().zip(out?) {
            let gold = s
                .labels
                .iter()
                .map(|(t, l)| {
                    let spec = corpus.task(t)?;
                    Ok((t.clone(), l.ids().iter().map(|&i| spec.vocabulary[i].clone()).collect()))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            rows.push(PredictionRow {
                doc_id: doc.doc_id.clone(),
                sentence: s.index,
                gold,
                predictions,
            });
        }
    }
    Ok(rows)
}

fn split_metrics(rows: &[PredictionRow], tasks: &[TaskSpec]) -> Result<BTreeMap<String, crate::eval::MetricReport>> {
    let mut out = BTreeMap::new();
    for t in tasks {
        if let Some(r) = metrics_from_dump(rows, t)? {
            out.insert(t.name.clone(), r);
        }
    }
    Ok(out)
}

/// Trains a freshly initialized model on `corpus`.
pub fn train(
    corpus: &Corpus,
    model_config: &ModelConfig,
    weighting: &TaskWeighting,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    weighting.validate()?;
    corpus.task(&config.primary)?;
    for t in weighting.alpha.keys() {
        corpus.task(t)?;
    }
    let sampler = TaskSampler::new(corpus, weighting)?;
    let mut model = MultitaskModel::new(&corpus.tasks, model_config, config.seed)?;
    apply_freeze(&mut model, &config.freeze, &config.primary)?;
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut rng = named_rng(config.seed, "trainer.sampling");
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| (sampler.pool_size() / config.batch_size).max(1));
    let has_dev = corpus.documents_in(Split::Dev).next().is_some();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Vec<f64>>)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let (task, docs) = sampler.sample(&mut rng, config.batch_size);
            let alpha = weighting.get(task);
            let weight = alpha / docs.len() as f64;
            let mut step_loss = 0.0;
            for &d in &docs {
                let l = model.accumulate(&corpus.documents[d], task, weight)?;
                step_loss += weight * l;
            }
            if !step_loss.is_finite() {
                log::error!(
                    "divergence at epoch {epoch}, step {step}, task `{task}`: loss {step_loss}; {} non-finite parameters",
                    if model.has_non_finite() { "some" } else { "no" }
                );
                return Err(Error::Divergence {
                    epoch,
                    step,
                    task: task.to_string(),
                    loss: step_loss,
                });
            }
            total += step_loss;
            optimizer.step(&mut model);
        }
        let mut dev = BTreeMap::new();
        if has_dev {
            let rows = prediction_dump(&model, corpus, Split::Dev, config.execution)?;
            for (t, r) in split_metrics(&rows, &corpus.tasks)? {
                dev.insert(t, (r.macro_f1, r.micro_f1));
            }
        }
        let mean_loss = total / steps as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.5}");
        if let Some(&(mac, mic)) = dev.get(&config.primary) {
            let score = match config.early_stop.metric {
                StopMetric::Macro => mac,
                StopMetric::Micro => mic,
            };
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, model.snapshot()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        epochs.push(EpochMetrics { epoch, mean_loss, dev });
        if config.early_stop.patience.is_some_and(|p| since_best >= p) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, snap)) = &best {
        model.restore(snap);
    }
    let predictions = prediction_dump(&model, corpus, Split::Test, config.execution)?;
    let test = split_metrics(&predictions, &corpus.tasks)?;
    let mut run_model_config = model_config.clone();
    run_model_config.heads = model.heads.iter().map(|h| h.config.clone()).collect();
    let record = RunRecord {
        config: RunConfig {
            train: config.clone(),
            weighting: weighting.clone(),
            model: run_model_config,
            tasks: corpus.tasks.clone(),
        },
        metrics: RunMetrics {
            primary: config.primary.clone(),
            alpha: weighting.alpha.clone(),
            epochs,
            best_epoch,
            test,
        },
        predictions,
    };
    Ok(TrainOutcome { record, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn joint_loss_is_linear() {
        let w = TaskWeighting::new([("a", 0.7), ("b", 0.3)]);
        let l: BTreeMap<String, f64> = [("a".to_string(), 2.0), ("b".to_string(), 4.0)].into();
        assert!((joint_loss(&l, &w).unwrap() - 2.6).abs() < 1e-12);
        let mut w3 = w.clone();
        w3.alpha.values_mut().for_each(|a| *a *= 3.0);
        assert!((joint_loss(&l, &w3).unwrap() - 3.0 * 2.6).abs() < 1e-12);
        let missing: BTreeMap<String, f64> = [("z".to_string(), 1.0)].into();
        assert!(joint_loss(&missing, &w).is_err());
    }

    #[test]
    fn weighting_validation() {
        assert!(TaskWeighting::new([("a", 0.7), ("b", 0.3)]).validate().is_ok());
        assert!(TaskWeighting::new([("a", 0.7), ("b", 0.4)]).validate().is_err());
        assert!(TaskWeighting::new([("a", 1.2), ("b", -0.2)]).validate().is_err());
        assert_eq!(TaskWeighting::new([("a", 1.0), ("b", 0.0)]).active(), ["a"]);
    }

    #[test]
    fn sampler_draws_without_replacement() {
        let tasks = vec![TaskSpec::new("a", crate::corpus::TaskKind::Multiclass, vec!["x".into(), "y".into()])];
        let docs = (0..5)
            .map(|i| {
                let mut d = Document::from_texts(format!("d{i}"), "s", Split::Train, ["hello".to_string()]);
                d.sentences[0].labels.insert("a".into(), crate::corpus::Labels::Single(0));
                d
            })
            .collect();
        let corpus = Corpus::new(tasks, docs).unwrap();
        let sampler = TaskSampler::new(&corpus, &TaskWeighting::one_hot("a")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (t, mut d) = sampler.sample(&mut rng, 4);
            assert_eq!(t, "a");
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 4);
        }
        assert!(TaskSampler::new(&corpus, &TaskWeighting::one_hot("b")).is_err());
    }
}
