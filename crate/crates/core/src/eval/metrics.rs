//! Per-class precision/recall/F1, macro and micro F1, confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Rows are gold, columns predicted. Empty for multilabel reports.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub confusion: Vec<Vec<usize>>,
}

impl MetricReport {
    pub fn with_labels(mut self, labels: &[String]) -> Self {
        self.labels = labels.to_vec();
        self
    }

    pub fn f1_of(&self, class: usize) -> f64 {
        self.per_class[class].f1
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// F1 from counts as `2tp / (2tp + fp + fn)`, the harmonic mean of
/// precision and recall without intermediate rounding.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

fn from_counts(tp: &[usize], fp: &[usize], fn_: &[usize], support: Vec<usize>) -> (Vec<ClassScore>, f64, f64) {
    let per_class: Vec<ClassScore> = (0..tp.len())
        .map(|j| {
            let precision = ratio(tp[j], tp[j] + fp[j]);
            let recall = ratio(tp[j], tp[j] + fn_[j]);
            ClassScore {
                precision,
                recall,
                f1: f1(tp[j], fp[j], fn_[j]),
                support: support[j],
            }
        })
        .collect();
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
    };
    let (t, p, n): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let micro_f1 = f1(t, p, n);
    (per_class, macro_f1, micro_f1)
}

/// Single-label report. Classes without support score F1 = 0 and still
/// count towards the macro average.
pub fn metric_report(gold: &[usize], pred: &[usize], k: usize) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold labels vs {} predictions", gold.len(), pred.len())));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= k || p >= k {
            return Err(Error::Shape(format!("label out of range for k={k}: gold {g}, predicted {p}")));
        }
        confusion[g][p] += 1;
    }
    let tp: Vec<usize> = (0..k).map(|j| confusion[j][j]).collect();
    let fp: Vec<usize> = (0..k).map(|j| (0..k).map(|g| confusion[g][j]).sum::<usize>() - tp[j]).collect();
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let fn_: Vec<usize> = (0..k).map(|j| support[j] - tp[j]).collect();
    let (per_class, macro_f1, micro_f1) = from_counts(&tp, &fp, &fn_, support);
    Ok(MetricReport {
        labels: Vec::new(),
        per_class,
        macro_f1,
        micro_f1,
        confusion,
    })
}

/// Report over label sets, counting each (sentence, label) decision.
pub fn multilabel_report(gold: &[Vec<usize>], pred: &[Vec<usize>], k: usize) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold sets vs {} predictions", gold.len(), pred.len())));
    }
    let (mut tp, mut fp, mut fn_) = (vec![0; k], vec![0; k], vec![0; k]);
    let mut support = vec![0; k];
    for (g, p) in gold.iter().zip(pred) {
        if let Some(bad) = g.iter().chain(p).find(|&&y| y >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for k={k}")));
        }
        for j in 0..k {
            match (g.contains(&j), p.contains(&j)) {
                (true, true) => tp[j] += 1,
                (false, true) => fp[j] += 1,
                (true, false) => fn_[j] += 1,
                (false, false) => {}
            }
            support[j] += usize::from(g.contains(&j));
        }
    }
    let (per_class, macro_f1, micro_f1) = from_counts(&tp, &fp, &fn_, support);
    Ok(MetricReport {
        labels: Vec::new(),
        per_class,
        macro_f1,
        micro_f1,
        confusion: Vec::new(),
    })
}

/// Number of predictions per class.
pub fn prediction_counts(pred: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &p in pred {
        if p < k {
            c[p] += 1;
        }
    }
    c
}
