//! Projection of relation and trigger annotations onto sentence-level label
//! sets, tag-inventory reduction, and length-matched downsampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Labels, Split, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::named_rng;

/// Per-sentence label sets for one document.
pub type LabelSets = Vec<BTreeSet<String>>;

/// A relation between two spans, each an inclusive `[first, last]` range of
/// sentence indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    pub doc_id: String,
    pub label: String,
    pub span_a: [usize; 2],
    pub span_b: [usize; 2],
}

impl RelationRecord {
    pub fn new(doc_id: impl Into<String>, label: impl Into<String>, span_a: [usize; 2], span_b: [usize; 2]) -> Self {
        RelationRecord {
            doc_id: doc_id.into(),
            label: label.into(),
            span_a,
            span_b,
        }
    }

    fn describe(&self) -> String {
        format!(
            "relation `{}` in `{}` ({:?} / {:?})",
            self.label, self.doc_id, self.span_a, self.span_b
        )
    }
}

/// Reads JSON-lines records of any deserializable type, reporting the line
/// of the first malformed record.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(file), &path.display().to_string())
}

/// Every sentence touched by either span of a relation receives its label.
/// Relations for other documents are ignored.
pub fn project_relations_to_sentences(doc: &Document, relations: &[RelationRecord]) -> Result<LabelSets> {
    let mut sets = vec![BTreeSet::new(); doc.len()];
    for rel in relations.iter().filter(|r| r.doc_id == doc.doc_id) {
        if rel.label.is_empty() {
            return Err(Error::validation(format!("{} has an empty label", rel.describe())));
        }
        for [first, last] in [rel.span_a, rel.span_b] {
            if first > last || last >= doc.len() {
                return Err(Error::validation(format!(
                    "{} lies outside the document's {} sentences",
                    rel.describe(),
                    doc.len()
                )));
            }
            for set in &mut sets[first..=last] {
                set.insert(rel.label.clone());
            }
        }
    }
    Ok(sets)
}

/// Many-to-one tag reduction. A target of `None` drops the tag.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagMap {
    pub mapping: BTreeMap<String, Option<String>>,
}

impl TagMap {
    /// Parses the two-column TSV form. Target classes are added as
    /// self-mappings so that mapping is idempotent.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut mapping = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let (source, target) = match cols.as_slice() {
                [s, t] if !s.is_empty() && !t.is_empty() => (*s, *t),
                _ => {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: i + 1,
                        message: format!("expected `source<TAB>target`, got `{line}`"),
                    })
                }
            };
            let target = (target != "-").then(|| target.to_string());
            if let Some(prev) = mapping.insert(source.to_string(), target.clone()) {
                if prev != target {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: i + 1,
                        message: format!("tag `{source}` mapped twice"),
                    });
                }
            }
        }
        let targets: Vec<String> = mapping.values().flatten().cloned().collect();
        for t in targets {
            mapping.entry(t.clone()).or_insert(Some(t));
        }
        Ok(TagMap { mapping })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TagMap::parse(&text, &path.display().to_string())
    }

    /// The RST reduction shipped with the crate.
    pub fn rst() -> Self {
        TagMap::parse(include_str!("../data/rst_tagmap.tsv"), "rst_tagmap.tsv").expect("bundled tag map parses")
    }

    /// Distinct target classes.
    pub fn classes(&self) -> BTreeSet<String> {
        self.mapping.values().flatten().cloned().collect()
    }
}

/// Replaces every tag by its class; dropped tags vanish, empty sets stay.
pub fn map_tags(sets: &[BTreeSet<String>], map: &TagMap) -> Result<LabelSets> {
    let unknown: BTreeSet<&String> = sets
        .iter()
        .flatten()
        .filter(|t| !map.mapping.contains_key(*t))
        .collect();
    if !unknown.is_empty() {
        let list: Vec<&str> = unknown.into_iter().map(String::as_str).collect();
        return Err(Error::validation(format!("unmapped tags: {}", list.join(", "))));
    }
    Ok(sets
        .iter()
        .map(|set| set.iter().filter_map(|t| map.mapping[t].clone()).collect())
        .collect())
}

/// Builds a multilabel corpus for `task` from documents with label sets.
/// Without an explicit vocabulary, labels are ordered by training-split
/// sentence count (descending, then by name).
pub fn label_sets_to_corpus(
    task: &str,
    vocabulary: Option<Vec<String>>,
    docs: Vec<(Document, LabelSets)>,
) -> Result<Corpus> {
    let vocabulary = match vocabulary {
        Some(v) => v,
        None => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for (doc, sets) in &docs {
                for set in sets {
                    for t in set {
                        *counts.entry(t).or_default() += usize::from(doc.split == Split::Train);
                    }
                }
            }
            let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            v.into_iter().map(|(t, _)| t.to_string()).collect()
        }
    };
    let spec = TaskSpec::new(task, TaskKind::Multilabel, vocabulary);
    let index: HashMap<&str, usize> = spec.vocabulary.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut documents = Vec::with_capacity(docs.len());
    for (mut doc, sets) in docs {
        if sets.len() != doc.len() {
            return Err(Error::Shape(format!(
                "document `{}` has {} sentences but {} label sets",
                doc.doc_id,
                doc.len(),
                sets.len()
            )));
        }
        for (sentence, set) in doc.sentences.iter_mut().zip(&sets) {
            let ids = set
                .iter()
                .map(|t| {
                    index.get(t.as_str()).copied().ok_or_else(|| {
                        Error::validation(format!("label `{t}` not in the vocabulary of `{task}`"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sentence.labels.insert(task.to_string(), Labels::multi(ids));
        }
        documents.push(doc);
    }
    Corpus::new(vec![spec.clone()], documents)
}

/// Keeps only tags assigned to more than `min_sentences` training
/// sentences of `task`. A threshold of 0 leaves the corpus untouched.
/// An emptied vocabulary surfaces as a validation error from the corpus.
pub fn filter_rare_tags(corpus: &Corpus, task: &str, min_sentences: usize) -> Result<Corpus> {
    let spec = corpus.task(task)?;
    if min_sentences == 0 {
        return Ok(corpus.clone());
    }
    let mut counts = vec![0usize; spec.k()];
    for doc in corpus.documents_in(Split::Train) {
        for s in &doc.sentences {
            if let Some(l) = s.labels.get(task) {
                for &id in l.ids() {
                    counts[id] += 1;
                }
            }
        }
    }
    let kept: Vec<usize> = (0..spec.k()).filter(|&i| counts[i] > min_sentences).collect();
    let mut remap = vec![None; spec.k()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = Some(new);
    }
    let mut new_spec = spec.clone();
    new_spec.vocabulary = kept.iter().map(|&i| spec.vocabulary[i].clone()).collect();
    if let Some(w) = &spec.loss.class_weights {
        new_spec.loss.class_weights = Some(kept.iter().map(|&i| w[i]).collect());
    }
    let mut out = corpus.clone();
    for t in &mut out.tasks {
        if t.name == task {
            *t = new_spec.clone();
        }
    }
    for doc in &mut out.documents {
        for s in &mut doc.sentences {
            let updated = match s.labels.get(task) {
                None => continue,
                Some(Labels::Multi(ids)) => Some(Labels::multi(ids.iter().filter_map(|&i| remap[i]))),
                Some(Labels::Single(id)) => remap[*id].map(Labels::Single),
            };
            match updated {
                Some(l) => s.labels.insert(task.to_string(), l),
                None => s.labels.remove(task),
            };
        }
    }
    out.validate()?;
    Ok(out)
}

pub const TEMPORAL_TAGS: [&str; 5] = ["Temporal", "Asynchronous", "Precedence", "Synchrony", "Succession"];

/// Restricts relations to the temporal whitelist and drops documents left
/// without any. Dotted sense paths (`Temporal.Asynchronous.Precedence`)
/// contribute one relation per whitelisted component.
pub fn filter_pdtb_temporal(relations: &[RelationRecord], docs: Vec<Document>) -> (Vec<RelationRecord>, Vec<Document>) {
    let mut kept = Vec::new();
    for rel in relations {
        let mut seen = BTreeSet::new();
        for part in rel.label.split('.') {
            let part = part.trim();
            if TEMPORAL_TAGS.contains(&part) && seen.insert(part) {
                kept.push(RelationRecord {
                    label: part.to_string(),
                    ..rel.clone()
                });
            }
        }
    }
    let with_relations: BTreeSet<&str> = kept.iter().map(|r| r.doc_id.as_str()).collect();
    let docs = docs
        .into_iter()
        .filter(|d| with_relations.contains(d.doc_id.as_str()))
        .collect();
    (kept, docs)
}

pub const EVENT_TYPES: [&str; 4] = ["Actual Event", "Generic Event", "Event Mention", "Other"];

/// An event trigger located by sentence index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventNugget {
    pub doc_id: String,
    pub sentence: usize,
    pub trigger: String,
    pub event_type: String,
}

/// Each sentence gets the set of event types of the triggers it contains.
pub fn project_event_nuggets(doc: &Document, nuggets: &[EventNugget]) -> Result<LabelSets> {
    let mut sets = vec![BTreeSet::new(); doc.len()];
    for n in nuggets.iter().filter(|n| n.doc_id == doc.doc_id) {
        if !EVENT_TYPES.contains(&n.event_type.as_str()) {
            return Err(Error::validation(format!(
                "trigger `{}` in `{}` has unknown event type `{}`",
                n.trigger, n.doc_id, n.event_type
            )));
        }
        let set = sets.get_mut(n.sentence).ok_or_else(|| {
            Error::validation(format!(
                "trigger `{}` points at sentence {} of `{}`, which has {}",
                n.trigger,
                n.sentence,
                n.doc_id,
                doc.len()
            ))
        })?;
        set.insert(n.event_type.clone());
    }
    Ok(sets)
}

/// Upper bin edges (inclusive) from the target's length deciles.
pub fn decile_edges(lengths: &[usize]) -> Vec<usize> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut edges: Vec<usize> = (1..10).map(|q| sorted[((q * n).div_ceil(10)).max(1) - 1]).collect();
    edges.dedup();
    edges
}

fn bin_of(len: usize, edges: &[usize]) -> usize {
    edges.iter().position(|&e| len <= e).unwrap_or(edges.len())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DownsampleReport {
    pub edges: Vec<usize>,
    pub target_share: Vec<f64>,
    pub available: Vec<usize>,
    pub selected: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Selects a subset of `aux` whose document-length histogram over the
/// target's decile bins follows the target's bin shares. The subset is as
/// large as the scarcest bin allows, optionally capped at `max_documents`.
/// Output keeps the input order.
pub fn downsample_to_length_distribution(
    aux: &Corpus,
    target: &Corpus,
    seed: u64,
    max_documents: Option<usize>,
) -> Result<(Corpus, DownsampleReport)> {
    if aux.documents.is_empty() || target.documents.is_empty() {
        return Err(Error::Degenerate("downsampling needs non-empty corpora".into()));
    }
    let target_lengths: Vec<usize> = target.documents.iter().map(Document::len).collect();
    let edges = decile_edges(&target_lengths);
    let bins = edges.len() + 1;
    let mut share = vec![0.0; bins];
    for &l in &target_lengths {
        share[bin_of(l, &edges)] += 1.0;
    }
    share.iter_mut().for_each(|s| *s /= target_lengths.len() as f64);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, d) in aux.documents.iter().enumerate() {
        members[bin_of(d.len(), &edges)].push(i);
    }
    let mut report = DownsampleReport {
        edges: edges.clone(),
        target_share: share.clone(),
        available: members.iter().map(Vec::len).collect(),
        ..Default::default()
    };
    // total size the fullest feasible histogram supports
    let mut total = (0..bins)
        .filter(|&b| share[b] > 0.0 && !members[b].is_empty())
        .map(|b| members[b].len() as f64 / share[b])
        .fold(f64::INFINITY, f64::min);
    if !total.is_finite() {
        let msg = "auxiliary and target document lengths do not overlap; nothing selected".to_string();
        log::warn!("{msg}");
        report.warnings.push(msg);
        report.selected = vec![0; bins];
        return Ok((Corpus::new(aux.tasks.clone(), Vec::new())?, report));
    }
    if let Some(cap) = max_documents {
        total = total.min(cap as f64);
    }
    let mut chosen = Vec::new();
    for b in 0..bins {
        let want = (total * share[b]).round() as usize;
        if want > members[b].len() {
            let msg = format!(
                "length bin {b} needs {want} documents but only {} are available",
                members[b].len()
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        let mut pool = members[b].clone();
        pool.shuffle(&mut named_rng(seed, &format!("downsample.bin{b}")));
        pool.truncate(want);
        report.selected.push(pool.len());
        chosen.extend(pool);
    }
    chosen.sort_unstable();
    let documents = chosen.into_iter().map(|i| aux.documents[i].clone()).collect();
    Ok((Corpus::new(aux.tasks.clone(), documents)?, report))
}
