//! Serialized outcome of one training run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TaskWeighting, TrainConfig};
use crate::corpus::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::metrics::{metric_report, multilabel_report, MetricReport};
use crate::nn::Checkpoint;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub weighting: TaskWeighting,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

/// One evaluation sentence with gold labels and every head's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub doc_id: String,
    pub sentence: usize,
    pub gold: BTreeMap<String, Vec<String>>,
    pub predictions: BTreeMap<String, HeadOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Dev-split macro and micro F1 per task.
    pub dev: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub primary: String,
    pub alpha: BTreeMap<String, f64>,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub test: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub metrics: RunMetrics,
    pub predictions: Vec<PredictionRow>,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Metrics of `task` recomputed from a prediction dump, over the rows that
/// carry gold labels for it.
pub fn metrics_from_dump(rows: &[PredictionRow], task: &TaskSpec) -> Result<Option<MetricReport>> {
    let id = |label: &str| {
        task.label_id(label)
            .ok_or_else(|| Error::validation(format!("task `{}`: unknown label `{label}` in dump", task.name)))
    };
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for row in rows {
        let (Some(g), Some(p)) = (row.gold.get(&task.name), row.predictions.get(&task.name)) else {
            continue;
        };
        gold.push(g.iter().map(|l| id(l)).collect::<Result<Vec<_>>>()?);
        pred.push(p.labels.iter().map(|l| id(l)).collect::<Result<Vec<_>>>()?);
    }
    if gold.is_empty() {
        return Ok(None);
    }
    let report = match task.kind {
        TaskKind::Multiclass => {
            let first = |v: &Vec<usize>| v.first().copied().ok_or_else(|| Error::validation("empty multiclass entry"));
            let g = gold.iter().map(first).collect::<Result<Vec<_>>>()?;
            let p = pred.iter().map(first).collect::<Result<Vec<_>>>()?;
            metric_report(&g, &p, task.k())?
        }
        TaskKind::Multilabel => multilabel_report(&gold, &pred, task.k())?,
    };
    Ok(Some(report.with_labels(&task.vocabulary)))
}

impl RunRecord {
    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.config
            .tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn primary_report(&self) -> Option<&MetricReport> {
        self.metrics.test.get(&self.metrics.primary)
    }

    pub fn save(&self, dir: impl AsRef<Path>, checkpoint: Option<&Checkpoint>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(CONFIG_FILE), &to_json(&self.config)?)?;
        write_file(&dir.join(METRICS_FILE), &to_json(&self.metrics)?)?;
        let path = dir.join(PREDICTIONS_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for row in &self.predictions {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        if let Some(ck) = checkpoint {
            let path = dir.join(CHECKPOINT_FILE);
            write_file(&path, &serde_json::to_string(ck)?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = read_json(&dir.join(CONFIG_FILE))?;
        let metrics = read_json(&dir.join(METRICS_FILE))?;
        let path = dir.join(PREDICTIONS_FILE);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let predictions =
            crate::adapters::read_jsonl(std::io::BufReader::new(file), &path.display().to_string())?;
        Ok(RunRecord {
            config,
            metrics,
            predictions,
        })
    }
}
