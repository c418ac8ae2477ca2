//! α grid search over training runs and the summaries drawn from it.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trainer::{train, ModelConfig, RunRecord, TaskWeighting, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrial {
    pub alpha: BTreeMap<String, f64>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    /// Primary-task F1 per label.
    pub per_class_f1: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl AlphaTrial {
    pub fn from_record(record: &RunRecord) -> Self {
        let report = record.primary_report();
        AlphaTrial {
            alpha: record.metrics.alpha.clone(),
            macro_f1: report.map(|r| r.macro_f1),
            micro_f1: report.map(|r| r.micro_f1),
            per_class_f1: report
                .map(|r| r.labels.iter().cloned().zip(r.per_class.iter().map(|c| c.f1)).collect())
                .unwrap_or_default(),
            failure: None,
        }
    }

    pub fn failed(alpha: &TaskWeighting, error: &Error) -> Self {
        AlphaTrial {
            alpha: alpha.alpha.clone(),
            macro_f1: None,
            micro_f1: None,
            per_class_f1: BTreeMap::new(),
            failure: Some(error.to_string()),
        }
    }

    pub fn score(&self, metric: Target) -> Option<f64> {
        match metric {
            Target::Macro => self.macro_f1,
            Target::Micro => self.micro_f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Macro,
    Micro,
}

/// Lexicographic comparison of α vectors over the union of their tasks, in
/// name order; missing entries count as 0.
pub fn compare_alpha(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Ordering {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    for k in keys {
        let x = a.get(k).copied().unwrap_or(0.0);
        let y = b.get(k).copied().unwrap_or(0.0);
        match x.total_cmp(&y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Index of the best trial by `score`; ties go to the lexicographically
/// smallest α. Trials without a score are skipped.
pub fn argmax_trial(trials: &[AlphaTrial], score: impl Fn(&AlphaTrial) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        let Some(s) = score(t) else { continue };
        best = match best {
            None => Some((i, s)),
            Some((j, b)) => {
                if s > b || (s == b && compare_alpha(&t.alpha, &trials[j].alpha) == Ordering::Less) {
                    Some((i, s))
                } else {
                    Some((j, b))
                }
            }
        };
    }
    best.map(|b| b.0)
}

/// Every point of the simplex over `tasks` with step `1/resolution`, in
/// lexicographic order of the integer compositions.
pub fn simplex_grid(tasks: &[String], resolution: usize) -> Result<Vec<TaskWeighting>> {
    if tasks.is_empty() || resolution == 0 {
        return Err(Error::validation("simplex grid needs tasks and a positive resolution"));
    }
    fn rec(left: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(left - v, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut parts = Vec::new();
    rec(resolution, tasks.len(), &mut Vec::new(), &mut parts);
    Ok(parts
        .into_iter()
        .map(|p| TaskWeighting::new(tasks.iter().zip(p).map(|(t, v)| (t.as_str(), v as f64 / resolution as f64))))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub trials: Vec<AlphaTrial>,
    pub best_macro: Option<usize>,
    pub best_micro: Option<usize>,
}

impl GridSummary {
    pub fn from_trials(trials: Vec<AlphaTrial>) -> Self {
        GridSummary {
            best_macro: argmax_trial(&trials, |t| t.macro_f1),
            best_micro: argmax_trial(&trials, |t| t.micro_f1),
            trials,
        }
    }
}

/// Runs one training per α with the same seed and settings. Failed trials
/// are kept in the summary without scores.
pub fn grid_search(
    corpus: &Corpus,
    model: &ModelConfig,
    config: &TrainConfig,
    grid: &[TaskWeighting],
    execution: Execution,
) -> Result<(GridSummary, Vec<Option<RunRecord>>)> {
    if grid.is_empty() {
        return Err(Error::validation("grid search needs at least one α vector"));
    }
    for w in grid {
        w.validate()?;
    }
    let runs = execution.map(grid, |w| train(corpus, model, w, config).map(|o| o.record));
    let mut trials = Vec::with_capacity(runs.len());
    let mut records = Vec::with_capacity(runs.len());
    for (w, run) in grid.iter().zip(runs) {
        match run {
            Ok(r) => {
                trials.push(AlphaTrial::from_record(&r));
                records.push(Some(r));
            }
            Err(e) => {
                log::warn!("trial {:?} failed: {e}", w.alpha);
                trials.push(AlphaTrial::failed(w, &e));
                records.push(None);
            }
        }
    }
    Ok((GridSummary::from_trials(trials), records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagBest {
    pub tag: String,
    pub f1: f64,
    pub alpha: BTreeMap<String, f64>,
}

/// For each primary label, the trial that maximizes its F1.
pub fn per_tag_best(trials: &[AlphaTrial]) -> Vec<TagBest> {
    let tags: Vec<String> = trials
        .iter()
        .find(|t| !t.per_class_f1.is_empty())
        .map(|t| t.per_class_f1.keys().cloned().collect())
        .unwrap_or_default();
    tags.into_iter()
        .filter_map(|tag| {
            let i = argmax_trial(trials, |t| t.per_class_f1.get(&tag).copied())?;
            Some(TagBest {
                f1: trials[i].per_class_f1[&tag],
                alpha: trials[i].alpha.clone(),
                tag,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(a: f64, mac: f64, mic: f64) -> AlphaTrial {
        AlphaTrial {
            alpha: [("a".to_string(), a), ("b".to_string(), 1.0 - a)].into(),
            macro_f1: Some(mac),
            micro_f1: Some(mic),
            per_class_f1: [("x".to_string(), mac)].into(),
            failure: None,
        }
    }

    #[test]
    fn simplex_points() {
        let g = simplex_grid(&["a".into(), "b".into(), "c".into()], 10).unwrap();
        assert_eq!(g.len(), 66);
        for w in &g {
            w.validate().unwrap();
        }
        assert_eq!(simplex_grid(&["a".into()], 10).unwrap().len(), 1);
    }

    #[test]
    fn ties_go_to_smaller_alpha() {
        let t = vec![trial(0.7, 0.5, 0.6), trial(0.3, 0.5, 0.4), trial(0.9, 0.4, 0.6)];
        let s = GridSummary::from_trials(t);
        assert_eq!(s.best_macro, Some(1));
        assert_eq!(s.best_micro, Some(0));
    }

    #[test]
    fn failed_trials_are_skipped() {
        let mut t = vec![trial(0.7, 0.5, 0.6), trial(0.3, 0.9, 0.9)];
        t[1].macro_f1 = None;
        t[1].micro_f1 = None;
        assert_eq!(GridSummary::from_trials(t.clone()).best_macro, Some(0));
        assert_eq!(per_tag_best(&t)[0].f1, 0.9);
    }
}
