//! Declarative experiment configuration (TOML) and the corpus preparation
//! pipeline it drives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{
    downsample_to_length_distribution, filter_pdtb_temporal, filter_rare_tags, label_sets_to_corpus, load_jsonl,
    project_event_nuggets, project_relations_to_sentences, map_tags, DownsampleReport, EventNugget, RelationRecord,
    TagMap,
};
use crate::augment::{Augmenter, Backtranslator, MockAugmenter, ProcessTranslator};
use crate::corpus::{Corpus, TaskKind, TASKS_FILE};
use crate::encoder::FreezeSpec;
use crate::error::{Error, Result};
use crate::eval::simplex_grid;
use crate::exec::Execution;
use crate::losses::LossConfig;
use crate::nn::OptimizerConfig;
use crate::synthetic::{self, SyntheticConfig};
use crate::trainer::{EarlyStop, FreezeConfig, ModelConfig, TaskWeighting, TrainConfig};

/// Where one task's sentences and labels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Source {
    /// An already-canonical corpus directory.
    Corpus { path: PathBuf },
    /// Relation annotations projected onto sentences, then mapped through a
    /// tag table (the built-in RST table when `tag_map` is absent).
    Relations {
        documents: PathBuf,
        relations: PathBuf,
        #[serde(default)]
        tag_map: Option<PathBuf>,
        /// Keep only temporal relations and the documents that have some.
        #[serde(default)]
        temporal_only: bool,
        #[serde(default)]
        vocabulary: Option<Vec<String>>,
    },
    /// Event triggers projected onto sentences.
    Events { documents: PathBuf, nuggets: PathBuf },
    /// Generated data; `part` is `primary` or `auxiliary`.
    Synthetic {
        part: String,
        #[serde(default)]
        config: SyntheticConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub task: String,
    pub source: Source,
    /// Drop tags with at most this many training sentences; 0 keeps all.
    #[serde(default)]
    pub min_sentences: usize,
    /// Match the primary dataset's document-length distribution.
    #[serde(default)]
    pub downsample: bool,
    #[serde(default)]
    pub max_documents: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
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

fn default_epochs() -> usize {
    3
}

fn default_batch() -> usize {
    1
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            steps_per_epoch: None,
            batch_size: default_batch(),
            optimizer: OptimizerConfig::default(),
            freeze: FreezeConfig::default(),
            early_stop: EarlyStop::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Tasks spanning the simplex; empty skips simplex points.
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Extra α vectors tried in addition to the simplex points.
    #[serde(default)]
    pub explicit: Vec<BTreeMap<String, f64>>,
    /// Run trials concurrently.
    #[serde(default)]
    pub parallel: bool,
}

fn default_resolution() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmenterConfig {
    Mock,
    /// Round trip through two external translator programs.
    Process { out: ProcessTranslator, back: ProcessTranslator },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub augmenter: AugmenterConfig,
    /// Paraphrases per training document.
    #[serde(default = "default_paraphrases")]
    pub n: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Train on the expanded set.
    #[serde(default)]
    pub use_in_training: bool,
}

fn default_paraphrases() -> usize {
    10
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    pub primary: String,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    /// Loss per task; tasks without an entry keep their default loss.
    #[serde(default)]
    pub losses: BTreeMap<String, LossConfig>,
    /// α per task; defaults to one-hot on the primary task.
    #[serde(default)]
    pub weighting: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: Option<AugmentSection>,
}

/// Sets `value` at a dotted `path` of a TOML table, creating tables on the
/// way. The value is parsed as a TOML literal, falling back to a string.
pub fn apply_override(root: &mut toml::Table, path: &str, value: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::validation(format!("bad override key `{path}`")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::validation(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses a config file after applying `key=value` overrides. Relative
    /// paths are taken from the config file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: origin.clone(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let mut config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
            path: origin,
            line: 0,
            message: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.out);
        for d in &mut self.datasets {
            match &mut d.source {
                Source::Corpus { path } => resolve(base, path),
                Source::Relations {
                    documents,
                    relations,
                    tag_map,
                    ..
                } => {
                    resolve(base, documents);
                    resolve(base, relations);
                    if let Some(t) = tag_map {
                        resolve(base, t);
                    }
                }
                Source::Events { documents, nuggets } => {
                    resolve(base, documents);
                    resolve(base, nuggets);
                }
                Source::Synthetic { .. } => {}
            }
        }
    }

    pub fn task_names(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.task.clone()).collect()
    }

    /// Task kind when it is known without reading data.
    fn declared_kind(&self, d: &DatasetConfig) -> Result<Option<TaskKind>> {
        Ok(match &d.source {
            Source::Relations { .. } | Source::Events { .. } => Some(TaskKind::Multilabel),
            Source::Synthetic { .. } => Some(TaskKind::Multiclass),
            Source::Corpus { path } => {
                let p = path.join(TASKS_FILE);
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let tasks: Vec<crate::corpus::TaskSpec> = serde_json::from_str(&text)?;
                let t = tasks
                    .iter()
                    .find(|t| t.name == d.task)
                    .ok_or_else(|| Error::validation(format!("{} does not declare task `{}`", p.display(), d.task)))?;
                Some(t.kind)
            }
        })
    }

    /// Checks every cross reference (tasks, files, plug-ins) without
    /// touching the data itself.
    pub fn validate(&self) -> Result<()> {
        let names = self.task_names();
        let known: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if known.len() != names.len() {
            return Err(Error::validation("each dataset must define a distinct task"));
        }
        if !known.contains(self.primary.as_str()) {
            return Err(Error::validation(format!("primary task `{}` has no dataset", self.primary)));
        }
        let check = |t: &str, what: &str| {
            if known.contains(t) {
                Ok(())
            } else {
                Err(Error::validation(format!("{what} refers to unknown task `{t}`")))
            }
        };
        let exists = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::validation(format!("input path {} does not exist", p.display())))
            }
        };
        for d in &self.datasets {
            match &d.source {
                Source::Corpus { path } => exists(path)?,
                Source::Relations {
                    documents,
                    relations,
                    tag_map,
                    ..
                } => {
                    exists(documents)?;
                    exists(relations)?;
                    if let Some(t) = tag_map {
                        exists(t)?;
                    }
                }
                Source::Events { documents, nuggets } => {
                    exists(documents)?;
                    exists(nuggets)?;
                }
                Source::Synthetic { part, .. } => {
                    let expected = match part.as_str() {
                        "primary" => synthetic::PRIMARY,
                        "auxiliary" => synthetic::AUXILIARY,
                        other => return Err(Error::validation(format!("unknown synthetic part `{other}`"))),
                    };
                    if d.task != expected {
                        return Err(Error::validation(format!(
                            "synthetic {part} data defines task `{expected}`, not `{}`",
                            d.task
                        )));
                    }
                }
            }
            if d.downsample && d.task == self.primary {
                return Err(Error::validation("the primary dataset cannot be downsampled"));
            }
            if let (Some(loss), Some(kind)) = (self.losses.get(&d.task), self.declared_kind(d)?) {
                // class count is only known after preparation; 2 passes any k check
                loss.validate(kind, loss.class_weights.as_ref().map_or(2, Vec::len))?;
            }
        }
        for t in self.losses.keys() {
            check(t, "a loss entry")?;
        }
        for h in &self.model.heads {
            check(&h.task, "a head config")?;
        }
        for t in &self.train.freeze.auxiliary_heads {
            check(t, "auxiliary head freezing")?;
        }
        if let FreezeSpec::UnfreezeLast(n) = self.train.freeze.embedder {
            if n > self.model.encoder.embedder.blocks {
                return Err(Error::validation(format!(
                    "cannot unfreeze {n} of {} embedder blocks",
                    self.model.encoder.embedder.blocks
                )));
            }
        }
        let w = self.weighting();
        for t in w.alpha.keys() {
            check(t, "the weighting")?;
        }
        w.validate()?;
        if let Some(g) = &self.grid {
            for t in g.tasks.iter().chain(g.explicit.iter().flat_map(|e| e.keys())) {
                check(t, "the grid")?;
            }
            self.grid_points()?;
        }
        if let Some(a) = &self.augment {
            if a.n == 0 {
                return Err(Error::validation("augment.n must be at least 1"));
            }
            if !(a.temperature >= 0.0) {
                return Err(Error::validation("augment.temperature must be non-negative"));
            }
        }
        self.train_config().validate()
    }

    pub fn weighting(&self) -> TaskWeighting {
        match &self.weighting {
            Some(a) => TaskWeighting::new(a.iter().map(|(k, v)| (k.as_str(), *v))),
            None => TaskWeighting::one_hot(&self.primary),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            primary: self.primary.clone(),
            seed: self.seed,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            batch_size: t.batch_size,
            optimizer: t.optimizer.clone(),
            freeze: t.freeze.clone(),
            early_stop: t.early_stop.clone(),
            execution: t.execution,
        }
    }

    /// Simplex points followed by explicit vectors, duplicates removed.
    pub fn grid_points(&self) -> Result<Vec<TaskWeighting>> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::validation("no [grid] section in the config"))?;
        let mut points = if g.tasks.is_empty() {
            Vec::new()
        } else {
            simplex_grid(&g.tasks, g.resolution)?
        };
        for e in &g.explicit {
            let w = TaskWeighting::new(e.iter().map(|(k, v)| (k.as_str(), *v)));
            w.validate()?;
            if !points.iter().any(|p| p.alpha == w.alpha) {
                points.push(w);
            }
        }
        if points.is_empty() {
            return Err(Error::validation("the grid is empty"));
        }
        Ok(points)
    }

    pub fn augmenter(&self) -> Result<Box<dyn Augmenter>> {
        let a = self
            .augment
            .as_ref()
            .ok_or_else(|| Error::validation("no [augment] section in the config"))?;
        Ok(match &a.augmenter {
            AugmenterConfig::Mock => Box::new(MockAugmenter::new(a.temperature, self.seed)),
            AugmenterConfig::Process { out, back } => Box::new(Backtranslator {
                out: Box::new(out.clone()),
                back: Box::new(back.clone()),
                temperature: a.temperature,
                seed: self.seed,
            }),
        })
    }
}

fn load_documents(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::read_documents(BufReader::new(file), Vec::new(), &path.display().to_string())
}

fn with_context<T>(task: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("dataset `{task}`: {m}")),
        other => other,
    })
}

fn build_dataset(d: &DatasetConfig, seed: u64) -> Result<Corpus> {
    match &d.source {
        Source::Corpus { path } => Corpus::load(path)?.restrict_tasks(std::slice::from_ref(&d.task)),
        Source::Synthetic { part, config } => match part.as_str() {
            "primary" => synthetic::primary_corpus(config, seed),
            _ => synthetic::auxiliary_corpus(config, seed),
        },
        Source::Relations {
            documents,
            relations,
            tag_map,
            temporal_only,
            vocabulary,
        } => {
            let docs = load_documents(documents)?.documents;
            let mut rels: Vec<RelationRecord> = load_jsonl(relations)?;
            let docs = if *temporal_only {
                let (kept, docs) = filter_pdtb_temporal(&rels, docs);
                rels = kept;
                docs
            } else {
                docs
            };
            let map = match tag_map {
                Some(p) => Some(TagMap::load(p)?),
                None if *temporal_only => None,
                None => Some(TagMap::rst()),
            };
            let mut labelled = Vec::with_capacity(docs.len());
            for doc in docs {
                let mine: Vec<RelationRecord> = rels.iter().filter(|r| r.doc_id == doc.doc_id).cloned().collect();
                let sets = project_relations_to_sentences(&doc, &mine)?;
                let sets = match &map {
                    Some(m) => map_tags(&sets, m)?,
                    None => sets,
                };
                labelled.push((doc, sets));
            }
            label_sets_to_corpus(&d.task, vocabulary.clone(), labelled)
        }
        Source::Events { documents, nuggets } => {
            let docs = load_documents(documents)?.documents;
            let nuggets: Vec<EventNugget> = load_jsonl(nuggets)?;
            let mut labelled = Vec::with_capacity(docs.len());
            for doc in docs {
                let sets = project_event_nuggets(&doc, &nuggets)?;
                labelled.push((doc, sets));
            }
            label_sets_to_corpus(&d.task, None, labelled)
        }
    }
}

/// Outcome of corpus preparation.
pub struct Prepared {
    pub corpus: Corpus,
    pub downsampling: BTreeMap<String, DownsampleReport>,
}

/// Runs every dataset's adapter chain and merges the results.
pub fn prepare_corpus(config: &ExperimentConfig) -> Result<Prepared> {
    let mut built = BTreeMap::new();
    for d in &config.datasets {
        let mut c = with_context(&d.task, build_dataset(d, config.seed))?;
        c = with_context(&d.task, filter_rare_tags(&c, &d.task, d.min_sentences))?;
        built.insert(d.task.clone(), c);
    }
    let mut downsampling = BTreeMap::new();
    let primary = built[&config.primary].clone();
    for d in &config.datasets {
        if d.downsample || d.max_documents.is_some() {
            let c = &built[&d.task];
            let (sampled, report) = if d.downsample {
                downsample_to_length_distribution(c, &primary, config.seed, d.max_documents)?
            } else {
                let mut c = c.clone();
                c.documents.truncate(d.max_documents.unwrap_or(usize::MAX));
                (c, DownsampleReport::default())
            };
            downsampling.insert(d.task.clone(), report);
            built.insert(d.task.clone(), sampled);
        }
    }
    let mut corpus = Corpus::merge(config.datasets.iter().map(|d| built[&d.task].clone()))?;
    for (task, loss) in &config.losses {
        let spec = corpus
            .tasks
            .iter_mut()
            .find(|t| &t.name == task)
            .ok_or_else(|| Error::UnknownTask(task.clone()))?;
        loss.validate(spec.kind, spec.k())?;
        spec.loss = loss.clone();
    }
    Ok(Prepared { corpus, downsampling })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_strings() {
        let mut t: toml::Table = "seed = 1\n[train]\nepochs = 2\n".parse().unwrap();
        apply_override(&mut t, "train.epochs", "5").unwrap();
        apply_override(&mut t, "train.optimizer.lr", "0.01").unwrap();
        apply_override(&mut t, "primary", "nd").unwrap();
        assert_eq!(t["train"]["epochs"].as_integer(), Some(5));
        assert_eq!(t["train"]["optimizer"]["lr"].as_float(), Some(0.01));
        assert_eq!(t["primary"].as_str(), Some("nd"));
        assert!(apply_override(&mut t, "seed.x", "1").is_err());
    }
}
