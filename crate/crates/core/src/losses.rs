//! Training losses over probabilities, each returning its value together with
//! the analytic gradient.
//!
//! The dice family follows the F1-surrogate formulation: `γ` smooths both
//! numerator and denominator so that true negatives contribute. The global
//! (summed) forms are evaluated over whatever batch is passed in.

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::error::{Error, Result};

/// Probability floor for log terms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Bce,
    Dice,
    DiceSquared,
    SelfAdjustingDice,
    GeneralizedDice,
}

/// How per-column binary dice losses are combined into one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceCombine {
    /// (Weighted) mean over columns.
    #[default]
    Macro,
    /// Σ_j DL_j / N_j², skipping columns with no positives.
    Generalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub combine: DiceCombine,
}

fn default_gamma() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            gamma: 1.0,
            class_weights: None,
            combine: DiceCombine::default(),
        }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Multiclass => LossConfig::new(LossKind::Ce),
            TaskKind::Multilabel => LossConfig::new(LossKind::Bce),
        }
    }

    pub fn validate(&self, task_kind: TaskKind, k: usize) -> Result<()> {
        match (self.kind, task_kind) {
            (LossKind::Ce, TaskKind::Multilabel) => {
                return Err(Error::validation("cross-entropy needs a multiclass task"))
            }
            (LossKind::Bce, TaskKind::Multiclass) => {
                return Err(Error::validation("binary cross-entropy needs a multilabel task"))
            }
            _ => {}
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != k {
                return Err(Error::validation(format!(
                    "class_weights has {} entries, task has {k} labels",
                    w.len()
                )));
            }
            if w.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::validation("class_weights must be non-negative"));
            }
        }
        Ok(())
    }

    fn dice_variant(&self) -> Option<(DiceVariant, DiceCombine)> {
        match self.kind {
            LossKind::Ce | LossKind::Bce => None,
            LossKind::Dice => Some((DiceVariant::Plain, self.combine)),
            LossKind::DiceSquared => Some((DiceVariant::Squared, self.combine)),
            LossKind::SelfAdjustingDice => Some((DiceVariant::SelfAdjusting, self.combine)),
            LossKind::GeneralizedDice => Some((DiceVariant::Plain, DiceCombine::Generalized)),
        }
    }

    /// Multiclass loss from row-wise logits `z` (N rows of width k) against
    /// gold ids. Returns the batch loss and its gradient w.r.t. the logits.
    pub fn multiclass_from_logits(&self, z: &[Vec<f64>], gold: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        if z.len() != gold.len() {
            return Err(Error::Shape(format!("{} rows vs {} labels", z.len(), gold.len())));
        }
        if z.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let k = z[0].len();
        let probs: Vec<Vec<f64>> = z.iter().map(|row| softmax(row)).collect();
        match self.dice_variant() {
            None => {
                // cross-entropy, fused with the softmax
                let n = z.len() as f64;
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(z.len());
                for (p, &y) in probs.iter().zip(gold) {
                    if y >= k {
                        return Err(Error::Shape(format!("label {y} out of range for k={k}")));
                    }
                    let w = self.class_weights.as_ref().map_or(1.0, |w| w[y]);
                    total += -w * p[y].max(LOG_EPS).ln();
                    let mut g: Vec<f64> = p.iter().map(|pi| w * pi / n).collect();
                    g[y] -= w / n;
                    grads.push(g);
                }
                Ok((total / n, grads))
            }
            Some((variant, combine)) => {
                let y = one_hot_rows(gold, k)?;
                let (value, dp) = column_dice(&probs, &y, self.gamma, variant, combine, self.class_weights.as_deref())?;
                let dz = probs.iter().zip(&dp).map(|(p, g)| softmax_backward(p, g)).collect();
                Ok((value, dz))
            }
        }
    }

    /// Multilabel loss from logits against multi-hot targets.
    pub fn multilabel_from_logits(&self, z: &[Vec<f64>], gold: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        if z.len() != gold.len() {
            return Err(Error::Shape(format!("{} rows vs {} targets", z.len(), gold.len())));
        }
        if z.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let probs: Vec<Vec<f64>> = z.iter().map(|row| row.iter().map(|&x| sigmoid(x)).collect()).collect();
        match self.dice_variant() {
            None => {
                let n = z.len() as f64;
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(z.len());
                for (p, y) in probs.iter().zip(gold) {
                    let (v, _) = binary_cross_entropy(p, y, self.class_weights.as_deref())?;
                    total += v;
                    let g = p
                        .iter()
                        .zip(y)
                        .enumerate()
                        .map(|(l, (pi, yi))| self.class_weights.as_ref().map_or(1.0, |w| w[l]) * (pi - yi) / n)
                        .collect();
                    grads.push(g);
                }
                Ok((total / n, grads))
            }
            Some((variant, combine)) => {
                let (value, dp) = column_dice(&probs, gold, self.gamma, variant, combine, self.class_weights.as_deref())?;
                let dz = probs
                    .iter()
                    .zip(&dp)
                    .map(|(p, g)| p.iter().zip(g).map(|(pi, gi)| gi * pi * (1.0 - pi)).collect())
                    .collect();
                Ok((value, dz))
            }
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Chains a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - dot)).collect()
}

fn one_hot_rows(gold: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    gold.iter()
        .map(|&y| {
            if y >= k {
                return Err(Error::Shape(format!("label {y} out of range for k={k}")));
            }
            let mut row = vec![0.0; k];
            row[y] = 1.0;
            Ok(row)
        })
        .collect()
}

/// `−w_y ln p_y`; p_y is clamped at [`LOG_EPS`].
pub fn cross_entropy(p: &[f64], y: usize, weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    if y >= p.len() {
        return Err(Error::Shape(format!("label {y} out of range for k={}", p.len())));
    }
    let w = weights.map_or(1.0, |w| w[y]);
    let mut grad = vec![0.0; p.len()];
    let py = if p[y] < LOG_EPS {
        log::warn!("cross-entropy: p_y = {} clamped to {LOG_EPS}", p[y]);
        LOG_EPS
    } else {
        grad[y] = -w / p[y];
        p[y]
    };
    Ok((-w * py.ln(), grad))
}

/// Sum over labels of `−w_l [y ln p + (1−y) ln(1−p)]`.
pub fn binary_cross_entropy(p: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} targets", p.len(), y.len())));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (l, (&pi, &yi)) in p.iter().zip(y).enumerate() {
        let w = weights.map_or(1.0, |w| w[l]);
        let a = pi.max(LOG_EPS);
        let b = (1.0 - pi).max(LOG_EPS);
        value += -w * (yi * a.ln() + (1.0 - yi) * b.ln());
        grad.push(-w * (yi / a - (1.0 - yi) / b));
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceForm {
    Plain,
    Squared,
}

/// Binary dice loss over a batch of N datapoints:
/// `1 − (2Σpy + Nγ) / (Σp + Σy + Nγ)`, or with squared sums in the
/// denominator for [`DiceForm::Squared`].
pub fn dice_loss(p: &[f64], y: &[f64], gamma: f64, form: DiceForm) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} targets", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Degenerate("dice loss over zero datapoints".into()));
    }
    let n = p.len() as f64;
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let num = 2.0 * inter + n * gamma;
    let den = match form {
        DiceForm::Plain => p.iter().sum::<f64>() + y.iter().sum::<f64>(),
        DiceForm::Squared => p.iter().map(|x| x * x).sum::<f64>() + y.iter().map(|x| x * x).sum::<f64>(),
    } + n * gamma;
    if den == 0.0 {
        return Ok((0.0, vec![0.0; p.len()]));
    }
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let dden = match form {
                DiceForm::Plain => 1.0,
                DiceForm::Squared => 2.0 * pi,
            };
            -(2.0 * yi * den - num * dden) / (den * den)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

/// Self-adjusting dice, evaluated per datapoint as
/// `1 − (2(1−p)p·y + γ) / ((1−p)p + y + γ)` and mean-reduced.
pub fn self_adjusting_dice(p: &[f64], y: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} targets", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Degenerate("dice loss over zero datapoints".into()));
    }
    let n = p.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let a = (1.0 - pi) * pi;
        let da = 1.0 - 2.0 * pi;
        let num = 2.0 * a * yi + gamma;
        let den = a + yi + gamma;
        if den == 0.0 {
            grad.push(0.0);
            continue;
        }
        total += 1.0 - num / den;
        grad.push(-da * (2.0 * yi * den - num) / (den * den) / n);
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceVariant {
    Plain,
    Squared,
    SelfAdjusting,
}

fn binary_dice(p: &[f64], y: &[f64], gamma: f64, variant: DiceVariant) -> Result<(f64, Vec<f64>)> {
    match variant {
        DiceVariant::Plain => dice_loss(p, y, gamma, DiceForm::Plain),
        DiceVariant::Squared => dice_loss(p, y, gamma, DiceForm::Squared),
        DiceVariant::SelfAdjusting => self_adjusting_dice(p, y, gamma),
    }
}

/// One-vs-rest dice over the k columns of an N×k probability matrix.
pub fn column_dice(
    probs: &[Vec<f64>],
    targets: &[Vec<f64>],
    gamma: f64,
    variant: DiceVariant,
    combine: DiceCombine,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if probs.len() != targets.len() {
        return Err(Error::Shape(format!("{} rows vs {} targets", probs.len(), targets.len())));
    }
    if probs.is_empty() {
        return Err(Error::Degenerate("dice loss over zero datapoints".into()));
    }
    let k = probs[0].len();
    if probs.iter().chain(targets).any(|r| r.len() != k) {
        return Err(Error::Shape("ragged probability/target rows".into()));
    }
    let column = |m: &[Vec<f64>], j: usize| m.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let col_weights: Vec<f64> = match combine {
        DiceCombine::Macro => {
            let w: Vec<f64> = (0..k).map(|j| weights.map_or(1.0, |w| w[j])).collect();
            let s: f64 = w.iter().sum();
            if s <= 0.0 {
                return Err(Error::Degenerate("class weights sum to zero".into()));
            }
            w.into_iter().map(|x| x / s).collect()
        }
        DiceCombine::Generalized => {
            let w: Vec<f64> = (0..k)
                .map(|j| {
                    let nj: f64 = targets.iter().map(|r| r[j]).sum();
                    if nj > 0.0 {
                        1.0 / (nj * nj)
                    } else {
                        0.0
                    }
                })
                .collect();
            if w.iter().all(|&x| x == 0.0) {
                return Err(Error::Degenerate("generalized dice: no class has any positives".into()));
            }
            w
        }
    };
    let mut value = 0.0;
    let mut grad = vec![vec![0.0; k]; probs.len()];
    for j in 0..k {
        if col_weights[j] == 0.0 {
            continue;
        }
        let (v, g) = binary_dice(&column(probs, j), &column(targets, j), gamma, variant)?;
        value += col_weights[j] * v;
        for (row, gi) in grad.iter_mut().zip(g) {
            row[j] += col_weights[j] * gi;
        }
    }
    Ok((value, grad))
}

/// `Σ_j (1/N_j²)·DL(p_j, y_j)` over one-hot targets; classes absent from the
/// targets are skipped.
pub fn generalized_dice(probs: &[Vec<f64>], targets: &[Vec<f64>], gamma: f64, form: DiceForm) -> Result<(f64, Vec<Vec<f64>>)> {
    let variant = match form {
        DiceForm::Plain => DiceVariant::Plain,
        DiceForm::Squared => DiceVariant::Squared,
    };
    column_dice(probs, targets, gamma, variant, DiceCombine::Generalized, None)
}
