//! Task-specific output layers over contextualized sentence rows.

pub mod crf;
pub mod hierarchy;

use serde::{Deserialize, Serialize};

use crate::corpus::{Labels, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::{sigmoid, softmax, LossConfig, LossKind};
use crate::nn::{named_rng, Affine, Param, ParamGroup, Parameters};

pub use crf::{crf_decode, crf_loss, crf_loss_with_grad, crf_marginals, log_partition, path_score};
pub use hierarchy::{build_hierarchical_labels, hierarchical_decide, Cluster, HierarchyFile, LabelHierarchy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    FfnnMulticlass,
    FfnnMultilabel,
    Crf,
    Hierarchical2level,
    HierarchicalFlatMultilabel,
}

impl HeadKind {
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Multiclass => HeadKind::FfnnMulticlass,
            TaskKind::Multilabel => HeadKind::FfnnMultilabel,
        }
    }

    pub fn task_kind(self) -> TaskKind {
        match self {
            HeadKind::FfnnMultilabel => TaskKind::Multilabel,
            _ => TaskKind::Multiclass,
        }
    }

    fn is_hierarchical(self) -> bool {
        matches!(self, HeadKind::Hierarchical2level | HeadKind::HierarchicalFlatMultilabel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub task: String,
    pub kind: HeadKind,
    /// Widths of tanh hidden layers before the output layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<Cluster>>,
}

impl HeadConfig {
    pub fn new(task: impl Into<String>, kind: HeadKind) -> Self {
        HeadConfig {
            task: task.into(),
            kind,
            hidden: Vec::new(),
            frozen: false,
            clusters: None,
        }
    }

    pub fn for_task(task: &TaskSpec) -> Self {
        HeadConfig::new(&task.name, HeadKind::default_for(task.kind))
    }
}

/// Per-sentence output of a head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Predicted label ids (one for multiclass heads).
    pub labels: Vec<usize>,
    /// Class probabilities over the vocabulary.
    pub probs: Vec<f64>,
}

struct Trace {
    /// Input to every affine layer, in order.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

pub struct Head {
    pub config: HeadConfig,
    pub layers: Vec<Affine>,
    pub transitions: Option<Param>,
    pub hierarchy: Option<LabelHierarchy>,
    pub loss: LossConfig,
    k: usize,
}

impl Head {
    pub fn new(config: HeadConfig, task: &TaskSpec, input: usize, seed: u64) -> Result<Self> {
        if config.task != task.name {
            return Err(Error::validation(format!(
                "head for `{}` built against task `{}`",
                config.task, task.name
            )));
        }
        if config.kind.task_kind() != task.kind {
            return Err(Error::validation(format!(
                "head kind {:?} does not fit {:?} task `{}`",
                config.kind, task.kind, task.name
            )));
        }
        let hierarchy = if config.kind.is_hierarchical() {
            let clusters = config
                .clusters
                .as_ref()
                .ok_or_else(|| Error::validation(format!("hierarchical head for `{}` needs clusters", task.name)))?;
            Some(LabelHierarchy::resolve(clusters, &task.vocabulary)?)
        } else {
            None
        };
        let out = hierarchy.as_ref().map_or(task.k(), LabelHierarchy::width);
        let prefix = format!("head.{}", task.name);
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(Affine::new(&format!("{prefix}.hidden{i}"), width, h, seed, ParamGroup::Other));
            width = h;
        }
        layers.push(Affine::new(&format!("{prefix}.output"), width, out, seed, ParamGroup::Other));
        let transitions = (config.kind == HeadKind::Crf).then(|| {
            let k = task.k();
            let mut p = Param::zeros(format!("{prefix}.transitions"), &[k, k], ParamGroup::Other);
            // small symmetric-breaking init; deterministic per task name
            use rand::Rng;
            let mut rng = named_rng(seed, &p.name);
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.01..0.01));
            p
        });
        let loss = match config.kind {
            HeadKind::Hierarchical2level => LossConfig::new(LossKind::Ce),
            HeadKind::HierarchicalFlatMultilabel => LossConfig::new(LossKind::Bce),
            _ => task.loss.clone(),
        };
        let mut head = Head {
            layers,
            transitions,
            hierarchy,
            loss,
            k: task.k(),
            config,
        };
        if head.config.frozen {
            head.set_frozen(true);
        }
        Ok(head)
    }

    pub fn task(&self) -> &str {
        &self.config.task
    }

    pub fn kind(&self) -> HeadKind {
        self.config.kind
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input()
    }

    /// Vocabulary size.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Width of the raw logit vector.
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output()
    }

    pub fn set_head_frozen(&mut self, frozen: bool) {
        self.config.frozen = frozen;
        self.set_frozen(frozen);
    }

    fn check_width(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head `{}` expects width {}, got {}",
                self.task(),
                self.input_dim(),
                row.len()
            )));
        }
        Ok(())
    }

    fn run(&self, row: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = row.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&x);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut x, y));
        }
        Trace { inputs, logits: x }
    }

    /// Backpropagates a logit gradient; returns the gradient w.r.t. the row.
    fn back(&mut self, trace: &Trace, d_logits: &[f64]) -> Vec<f64> {
        let mut g = d_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&trace.inputs[i], &g);
            if i > 0 {
                // through the tanh that produced inputs[i]
                for (gj, a) in g.iter_mut().zip(&trace.inputs[i]) {
                    *gj *= 1.0 - a * a;
                }
            }
        }
        g
    }

    pub fn logits(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_width(row)?;
        Ok(self.run(row).logits)
    }

    /// Class probabilities over the vocabulary for one row. CRF heads return
    /// per-row emission softmax here; sequence marginals come from `predict`.
    pub fn probabilities(&self, row: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(row)?;
        Ok(self.probs_from_logits(&z))
    }

    fn probs_from_logits(&self, z: &[f64]) -> Vec<f64> {
        match self.config.kind {
            HeadKind::FfnnMulticlass | HeadKind::Crf => softmax(z),
            HeadKind::FfnnMultilabel => z.iter().map(|&v| sigmoid(v)).collect(),
            HeadKind::Hierarchical2level | HeadKind::HierarchicalFlatMultilabel => {
                let h = self.hierarchy.as_ref().unwrap();
                let encoded = self.encoded_probs(z);
                // P(label) = P(cluster) · P(label | cluster)
                let mut p = vec![0.0; self.k];
                let mut total = 0.0;
                for (c, members) in h.members.iter().enumerate() {
                    let block = &encoded[h.block(c)];
                    for (pos, &id) in members.iter().enumerate() {
                        p[id] = encoded[c] * block[pos];
                        total += p[id];
                    }
                }
                if total > 0.0 {
                    p.iter_mut().for_each(|v| *v /= total);
                }
                p
            }
        }
    }

    /// Encoded-layout probabilities: softmax per block for the two-level
    /// head, element-wise sigmoid for the flat head.
    fn encoded_probs(&self, z: &[f64]) -> Vec<f64> {
        let h = self.hierarchy.as_ref().unwrap();
        match self.config.kind {
            HeadKind::Hierarchical2level => {
                let c = h.cluster_count();
                let mut out = softmax(&z[..c]);
                for b in 0..c {
                    out.extend(softmax(&z[h.block(b)]));
                }
                out
            }
            _ => z.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    /// Loss over the covered rows (`gold[i] == None` marks an unlabelled
    /// sentence) and the gradient w.r.t. every row. Parameter gradients are
    /// accumulated unless frozen; the row gradient always flows.
    pub fn loss(&mut self, rows: &[Vec<f64>], gold: &[Option<&Labels>]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.weighted_loss(rows, gold, 1.0)
    }

    /// As `loss`, with every gradient (parameters and rows) multiplied by
    /// `weight`. The returned value is unweighted.
    pub fn weighted_loss(&mut self, rows: &[Vec<f64>], gold: &[Option<&Labels>], weight: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        if rows.len() != gold.len() {
            return Err(Error::Shape(format!("{} rows vs {} gold entries", rows.len(), gold.len())));
        }
        for r in rows {
            self.check_width(r)?;
        }
        let mut d_rows = vec![vec![0.0; self.input_dim()]; rows.len()];
        let covered: Vec<usize> = (0..rows.len()).filter(|&i| gold[i].is_some()).collect();
        if covered.is_empty() {
            return Ok((0.0, d_rows));
        }
        let traces: Vec<Trace> = covered.iter().map(|&i| self.run(&rows[i])).collect();
        let z: Vec<Vec<f64>> = traces.iter().map(|t| t.logits.clone()).collect();
        let n = covered.len() as f64;
        let (value, dz) = match self.config.kind {
            HeadKind::FfnnMulticlass => {
                let ids = self.single_ids(&covered, gold)?;
                self.loss.multiclass_from_logits(&z, &ids)?
            }
            HeadKind::FfnnMultilabel => {
                let targets = covered
                    .iter()
                    .map(|&i| self.multi_hot(gold[i].unwrap()))
                    .collect::<Result<Vec<_>>>()?;
                self.loss.multilabel_from_logits(&z, &targets)?
            }
            HeadKind::Crf => {
                let ids = self.single_ids(&covered, gold)?;
                self.crf_runs(&covered, &z, &ids, n, weight)?
            }
            HeadKind::Hierarchical2level => {
                let ids = self.single_ids(&covered, gold)?;
                self.two_level_loss(&z, &ids)?
            }
            HeadKind::HierarchicalFlatMultilabel => {
                let ids = self.single_ids(&covered, gold)?;
                let h = self.hierarchy.as_ref().unwrap();
                let targets = ids
                    .iter()
                    .map(|&y| build_hierarchical_labels(y, h))
                    .collect::<Result<Vec<_>>>()?;
                self.loss.multilabel_from_logits(&z, &targets)?
            }
        };
        for ((&i, trace), g) in covered.iter().zip(&traces).zip(&dz) {
            let g: Vec<f64> = g.iter().map(|v| v * weight).collect();
            d_rows[i] = self.back(trace, &g);
        }
        Ok((value, d_rows))
    }

    fn single_ids(&self, covered: &[usize], gold: &[Option<&Labels>]) -> Result<Vec<usize>> {
        covered
            .iter()
            .map(|&i| {
                let y = gold[i].unwrap().single().ok_or_else(|| {
                    Error::validation(format!("task `{}` expects a single label per sentence", self.task()))
                })?;
                if y >= self.k {
                    return Err(Error::Shape(format!("label {y} out of range for k={}", self.k)));
                }
                Ok(y)
            })
            .collect()
    }

    fn multi_hot(&self, labels: &Labels) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.k];
        for &y in labels.ids() {
            *v.get_mut(y)
                .ok_or_else(|| Error::Shape(format!("label {y} out of range for k={}", self.k)))? = 1.0;
        }
        Ok(v)
    }

    /// CRF NLL summed over maximal runs of consecutive covered sentences,
    /// divided by the number of covered sentences.
    fn crf_runs(
        &mut self,
        covered: &[usize],
        z: &[Vec<f64>],
        ids: &[usize],
        n: f64,
        weight: f64,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let k = self.k;
        let t = self.transition_matrix();
        let mut dz = vec![Vec::new(); z.len()];
        let mut dt = vec![vec![0.0; k]; k];
        let mut total = 0.0;
        let mut start = 0;
        while start < covered.len() {
            let mut end = start + 1;
            while end < covered.len() && covered[end] == covered[end - 1] + 1 {
                end += 1;
            }
            let g = crf_loss_with_grad(&z[start..end], &t, &ids[start..end])?;
            let scale = weight / n;
            total += g.nll;
            for (slot, row) in dz[start..end].iter_mut().zip(g.emissions) {
                *slot = row.into_iter().map(|v| v / n).collect();
            }
            for (acc, row) in dt.iter_mut().zip(&g.transitions) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v * scale;
                }
            }
            start = end;
        }
        let trans = self.transitions.as_mut().unwrap();
        if !trans.frozen {
            for (g, v) in trans.grad.iter_mut().zip(dt.iter().flatten()) {
                *g += v;
            }
        }
        Ok((total / n, dz))
    }

    /// Cross-entropy on the cluster block plus cross-entropy on the gold
    /// cluster's label block.
    fn two_level_loss(&self, z: &[Vec<f64>], ids: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let h = self.hierarchy.as_ref().unwrap();
        let c = h.cluster_count();
        let n = z.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(z.len());
        for (row, &y) in z.iter().zip(ids) {
            let (cluster, pos) = h.locate(y)?;
            let mut g = vec![0.0; row.len()];
            let pc = softmax(&row[..c]);
            total -= pc[cluster].max(crate::losses::LOG_EPS).ln();
            for (j, p) in pc.iter().enumerate() {
                g[j] = (p - f64::from(j == cluster)) / n;
            }
            let range = h.block(cluster);
            let pl = softmax(&row[range.clone()]);
            total -= pl[pos].max(crate::losses::LOG_EPS).ln();
            for (j, p) in pl.iter().enumerate() {
                g[range.start + j] = (p - f64::from(j == pos)) / n;
            }
            grads.push(g);
        }
        Ok((total / n, grads))
    }

    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        self.transitions
            .as_ref()
            .map(|t| t.value.chunks(self.k).map(<[f64]>::to_vec).collect())
            .unwrap_or_default()
    }

    /// Predictions for every row of a document.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        for r in rows {
            self.check_width(r)?;
        }
        let z: Vec<Vec<f64>> = rows.iter().map(|r| self.run(r).logits).collect();
        match self.config.kind {
            HeadKind::Crf => {
                if z.is_empty() {
                    return Ok(Vec::new());
                }
                let t = self.transition_matrix();
                let path = crf_decode(&z, &t)?;
                let marg = crf_marginals(&z, &t)?;
                Ok(path
                    .into_iter()
                    .zip(marg)
                    .map(|(y, probs)| Prediction { labels: vec![y], probs })
                    .collect())
            }
            HeadKind::FfnnMultilabel => Ok(z
                .iter()
                .map(|row| {
                    let probs = self.probs_from_logits(row);
                    let labels = probs.iter().enumerate().filter(|(_, &p)| p >= 0.5).map(|(i, _)| i).collect();
                    Prediction { labels, probs }
                })
                .collect()),
            HeadKind::FfnnMulticlass => Ok(z
                .iter()
                .map(|row| {
                    let probs = self.probs_from_logits(row);
                    Prediction {
                        labels: vec![argmax(&probs)],
                        probs,
                    }
                })
                .collect()),
            HeadKind::Hierarchical2level | HeadKind::HierarchicalFlatMultilabel => z
                .iter()
                .map(|row| {
                    let encoded = self.encoded_probs(row);
                    let y = hierarchical_decide(&encoded, self.hierarchy.as_ref().unwrap())?;
                    Ok(Prediction {
                        labels: vec![y],
                        probs: self.probs_from_logits(row),
                    })
                })
                .collect(),
        }
    }
}

impl Parameters for Head {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.visit(f);
        }
        if let Some(t) = &self.transitions {
            f(t);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        if let Some(t) = &mut self.transitions {
            f(t);
        }
    }
}

/// Lowest index among maximal entries.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Probability vector for one contextualized row.
pub fn classify(row: &[f64], head: &Head) -> Result<Vec<f64>> {
    head.probabilities(row)
}

/// Label decision for one row under a hierarchical head.
pub fn hierarchical_classify(row: &[f64], head: &Head) -> Result<usize> {
    let h = head
        .hierarchy
        .as_ref()
        .ok_or_else(|| Error::validation(format!("head `{}` is not hierarchical", head.task())))?;
    let z = head.logits(row)?;
    hierarchical_decide(&head.encoded_probs(&z), h)
}
