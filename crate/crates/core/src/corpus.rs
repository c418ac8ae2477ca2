//! Multi-task, sentence-labeled document corpora.
//!
//! On disk a corpus is a directory holding `tasks.json` (the task
//! declarations) and `documents.jsonl` (one document per line). Labels are
//! strings in the files and are interned to vocabulary indices at load time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

pub const TASKS_FILE: &str = "tasks.json";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// A task's label(s) for one sentence, as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    Single(usize),
    /// Sorted, deduplicated.
    Multi(Vec<usize>),
}

impl Labels {
    pub fn multi(ids: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = ids.into_iter().collect();
        Labels::Multi(set.into_iter().collect())
    }

    pub fn ids(&self) -> &[usize] {
        match self {
            Labels::Single(id) => std::slice::from_ref(id),
            Labels::Multi(ids) => ids,
        }
    }

    pub fn single(&self) -> Option<usize> {
        match self {
            Labels::Single(id) => Some(*id),
            Labels::Multi(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub vocabulary: Vec<String>,
    pub loss: LossConfig,
    pub alpha_default: f64,
}

#[derive(Serialize, Deserialize)]
struct TaskSpecRecord {
    name: String,
    kind: TaskKind,
    vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<LossConfig>,
    #[serde(default = "default_alpha")]
    alpha_default: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, vocabulary: Vec<String>) -> Self {
        TaskSpec {
            name: name.into(),
            kind,
            vocabulary,
            loss: LossConfig::default_for(kind),
            alpha_default: 1.0,
        }
    }

    pub fn k(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.vocabulary.iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("task with empty name"));
        }
        if self.k() < 2 {
            return Err(Error::validation(format!(
                "task `{}` needs at least 2 labels, has {}",
                self.name,
                self.k()
            )));
        }
        let mut seen = HashSet::new();
        for label in &self.vocabulary {
            if !seen.insert(label) {
                return Err(Error::validation(format!(
                    "task `{}` has duplicate label `{label}`",
                    self.name
                )));
            }
        }
        if !(self.alpha_default >= 0.0) {
            return Err(Error::validation(format!(
                "task `{}` has negative alpha_default",
                self.name
            )));
        }
        self.loss.validate(self.kind, self.k())
    }
}

impl Serialize for TaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TaskSpecRecord {
            name: self.name.clone(),
            kind: self.kind,
            vocabulary: self.vocabulary.clone(),
            loss: Some(self.loss.clone()),
            alpha_default: self.alpha_default,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TaskSpecRecord::deserialize(d)?;
        Ok(TaskSpec {
            loss: r.loss.unwrap_or_else(|| LossConfig::default_for(r.kind)),
            name: r.name,
            kind: r.kind,
            vocabulary: r.vocabulary,
            alpha_default: r.alpha_default,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub text: String,
    pub index: usize,
    /// Task name to label assignment; tasks that do not cover the sentence are absent.
    pub labels: BTreeMap<String, Labels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub headline: Option<String>,
    pub source: String,
    pub split: Split,
    pub sentences: Vec<Sentence>,
}

impl Document {
    /// Builds a document from raw sentence texts, assigning contiguous indices.
    pub fn from_texts(
        doc_id: impl Into<String>,
        source: impl Into<String>,
        split: Split,
        texts: impl IntoIterator<Item = String>,
    ) -> Self {
        Document {
            doc_id: doc_id.into(),
            headline: None,
            source: source.into(),
            split,
            sentences: texts
                .into_iter()
                .enumerate()
                .map(|(index, text)| Sentence {
                    text,
                    index,
                    labels: BTreeMap::new(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn covers(&self, task: &str) -> bool {
        self.sentences.iter().any(|s| s.labels.contains_key(task))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub tasks: Vec<TaskSpec>,
    pub documents: Vec<Document>,
}

// File records. Field order here fixes the byte layout of saved corpora.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    doc_id: String,
    headline: Option<String>,
    source: String,
    split: Split,
    sentences: Vec<SentenceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceRecord {
    text: String,
    #[serde(default)]
    labels: BTreeMap<String, LabelValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelValue {
    One(String),
    Many(Vec<String>),
}

impl Corpus {
    pub fn new(tasks: Vec<TaskSpec>, documents: Vec<Document>) -> Result<Self> {
        let corpus = Corpus { tasks, documents };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn documents_in(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    /// Checks every corpus invariant.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for task in &self.tasks {
            task.validate()?;
            if !names.insert(task.name.as_str()) {
                return Err(Error::validation(format!("duplicate task `{}`", task.name)));
            }
        }
        let mut ids = HashSet::new();
        for doc in &self.documents {
            if !ids.insert(doc.doc_id.as_str()) {
                return Err(Error::validation(format!("duplicate doc_id `{}`", doc.doc_id)));
            }
            if doc.sentences.is_empty() {
                return Err(Error::validation(format!("document `{}` has no sentences", doc.doc_id)));
            }
            for (j, sentence) in doc.sentences.iter().enumerate() {
                if sentence.index != j {
                    return Err(Error::validation(format!(
                        "document `{}`: sentence index {} at position {j}",
                        doc.doc_id, sentence.index
                    )));
                }
                for (task_name, labels) in &sentence.labels {
                    let task = self.task(task_name).map_err(|_| {
                        Error::validation(format!(
                            "document `{}`, sentence {j}: undeclared task `{task_name}`",
                            doc.doc_id
                        ))
                    })?;
                    match (task.kind, labels) {
                        (TaskKind::Multiclass, Labels::Single(_)) | (TaskKind::Multilabel, Labels::Multi(_)) => {}
                        _ => {
                            return Err(Error::validation(format!(
                                "document `{}`, sentence {j}: label shape does not match {:?} task `{task_name}`",
                                doc.doc_id, task.kind
                            )))
                        }
                    }
                    if let Some(bad) = labels.ids().iter().find(|&&id| id >= task.k()) {
                        return Err(Error::validation(format!(
                            "document `{}`, sentence {j}: label id {bad} out of range for task `{task_name}`",
                            doc.doc_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads a corpus directory (`tasks.json` + `documents.jsonl`).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tasks_path = dir.join(TASKS_FILE);
        let raw = fs::read_to_string(&tasks_path).map_err(|e| Error::io(&tasks_path, e))?;
        let tasks: Vec<TaskSpec> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: tasks_path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let docs_path = dir.join(DOCUMENTS_FILE);
        let file = fs::File::open(&docs_path).map_err(|e| Error::io(&docs_path, e))?;
        Corpus::read_documents(BufReader::new(file), tasks, &docs_path.display().to_string())
    }

    /// Parses JSONL document records against already-declared tasks.
    pub fn read_documents(reader: impl BufRead, tasks: Vec<TaskSpec>, origin: &str) -> Result<Self> {
        let mut documents = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            documents.push(intern_record(record, &tasks)?);
        }
        Corpus::new(tasks, documents)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tasks_path = dir.join(TASKS_FILE);
        let mut tasks_json = serde_json::to_string_pretty(&self.tasks)?;
        tasks_json.push('\n');
        fs::write(&tasks_path, tasks_json).map_err(|e| Error::io(&tasks_path, e))?;
        let docs_path = dir.join(DOCUMENTS_FILE);
        let mut out = Vec::new();
        self.write_documents(&mut out)?;
        fs::write(&docs_path, out).map_err(|e| Error::io(&docs_path, e))
    }

    pub fn write_documents(&self, mut w: impl Write) -> Result<()> {
        for doc in &self.documents {
            let record = self.to_record(doc)?;
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    fn to_record(&self, doc: &Document) -> Result<DocumentRecord> {
        let mut sentences = Vec::with_capacity(doc.len());
        for s in &doc.sentences {
            let mut labels = BTreeMap::new();
            for (task_name, l) in &s.labels {
                let task = self.task(task_name)?;
                let value = match l {
                    Labels::Single(id) => LabelValue::One(task.vocabulary[*id].clone()),
                    Labels::Multi(ids) => {
                        LabelValue::Many(ids.iter().map(|&id| task.vocabulary[id].clone()).collect())
                    }
                };
                labels.insert(task_name.clone(), value);
            }
            sentences.push(SentenceRecord {
                text: s.text.clone(),
                labels,
            });
        }
        Ok(DocumentRecord {
            doc_id: doc.doc_id.clone(),
            headline: doc.headline.clone(),
            source: doc.source.clone(),
            split: doc.split,
            sentences,
        })
    }

    /// Joins corpora over disjoint tasks into one dataset. Tasks with the same
    /// name must be declared identically; doc ids must stay unique.
    pub fn merge(corpora: impl IntoIterator<Item = Corpus>) -> Result<Corpus> {
        let mut out = Corpus::default();
        for c in corpora {
            for task in c.tasks {
                match out.tasks.iter().find(|t| t.name == task.name) {
                    Some(existing) if existing != &task => {
                        return Err(Error::validation(format!(
                            "task `{}` declared differently in merged corpora",
                            task.name
                        )))
                    }
                    Some(_) => {}
                    None => out.tasks.push(task),
                }
            }
            out.documents.extend(c.documents);
        }
        out.validate()?;
        Ok(out)
    }

    /// Restricts the corpus to the named tasks: other tasks' labels are
    /// removed and documents left without any labels are dropped.
    pub fn restrict_tasks(&self, names: &[String]) -> Result<Corpus> {
        for n in names {
            self.task(n)?;
        }
        let keep: HashSet<&str> = names.iter().map(String::as_str).collect();
        let tasks = self.tasks.iter().filter(|t| keep.contains(t.name.as_str())).cloned().collect();
        let documents = self
            .documents
            .iter()
            .filter_map(|d| {
                let mut d = d.clone();
                for s in &mut d.sentences {
                    s.labels.retain(|t, _| keep.contains(t.as_str()));
                }
                d.sentences.iter().any(|s| !s.labels.is_empty()).then_some(d)
            })
            .collect();
        Corpus::new(tasks, documents)
    }
}

fn intern_record(record: DocumentRecord, tasks: &[TaskSpec]) -> Result<Document> {
    let mut sentences = Vec::with_capacity(record.sentences.len());
    for (index, s) in record.sentences.into_iter().enumerate() {
        let mut labels = BTreeMap::new();
        for (task_name, value) in s.labels {
            let task = tasks.iter().find(|t| t.name == task_name).ok_or_else(|| {
                Error::validation(format!(
                    "document `{}`, sentence {index}: undeclared task `{task_name}`",
                    record.doc_id
                ))
            })?;
            let lookup = |label: &str| {
                task.label_id(label).ok_or_else(|| {
                    Error::validation(format!(
                        "task `{task_name}`, document `{}`, sentence {index}: unknown label `{label}`",
                        record.doc_id
                    ))
                })
            };
            let assigned = match (task.kind, value) {
                (TaskKind::Multiclass, LabelValue::One(l)) => Labels::Single(lookup(&l)?),
                (TaskKind::Multiclass, LabelValue::Many(ls)) => {
                    if ls.len() != 1 {
                        return Err(Error::validation(format!(
                            "task `{task_name}` is multiclass but document `{}`, sentence {index} has {} labels",
                            record.doc_id,
                            ls.len()
                        )));
                    }
                    Labels::Single(lookup(&ls[0])?)
                }
                (TaskKind::Multilabel, LabelValue::One(l)) => Labels::Multi(vec![lookup(&l)?]),
                (TaskKind::Multilabel, LabelValue::Many(ls)) => {
                    Labels::multi(ls.iter().map(|l| lookup(l)).collect::<Result<Vec<_>>>()?)
                }
            };
            labels.insert(task_name, assigned);
        }
        sentences.push(Sentence {
            text: s.text,
            index,
            labels,
        });
    }
    Ok(Document {
        doc_id: record.doc_id,
        headline: record.headline,
        source: record.source,
        split: record.split,
        sentences,
    })
}

/// Per-label assignment counts for `task` over `split`, sorted by count
/// descending with ties in vocabulary order. Zero-count labels are included.
/// An empty split yields an empty list.
pub fn class_counts(corpus: &Corpus, task: &str, split: Split) -> Result<Vec<(String, usize)>> {
    let spec = corpus.task(task)?;
    let mut counts = vec![0usize; spec.k()];
    let mut any_doc = false;
    for doc in corpus.documents_in(split) {
        any_doc = true;
        for s in &doc.sentences {
            if let Some(l) = s.labels.get(task) {
                for &id in l.ids() {
                    counts[id] += 1;
                }
            }
        }
    }
    if !any_doc {
        return Ok(Vec::new());
    }
    let mut out: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    // stable sort keeps vocabulary order among ties
    out.sort_by(|a, b| b.1.cmp(&a.1));
    Ok(out
        .into_iter()
        .map(|(id, n)| (spec.vocabulary[id].clone(), n))
        .collect())
}

/// Class imbalance: mean of the top ⌊k/2⌋ counts divided by the bottom-group
/// sum over ⌊k/2⌋+1. The denominator is applied literally for every k, so for
/// even k the bottom group is divided by one more than its size.
pub fn imbalance_ratio(counts_desc: &[usize]) -> Result<f64> {
    let k = counts_desc.len();
    if k < 2 {
        return Err(Error::Degenerate(format!("imbalance needs k >= 2, got {k}")));
    }
    if counts_desc.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::validation("counts must be sorted descending"));
    }
    let half = k / 2;
    let top: usize = counts_desc[..half].iter().sum();
    let bottom: usize = counts_desc[half..].iter().sum();
    if bottom == 0 {
        return Err(Error::Degenerate("bottom half of the class counts sums to zero".into()));
    }
    Ok((top as f64 / half as f64) / (bottom as f64 / (half as f64 + 1.0)))
}

/// One row of a corpus statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: String,
    pub kind: TaskKind,
    pub documents: usize,
    pub sentences: usize,
    pub k: usize,
    pub imbalance: Option<f64>,
}

pub fn task_stats(corpus: &Corpus) -> Result<Vec<TaskStats>> {
    let mut rows = Vec::new();
    for task in &corpus.tasks {
        let docs: Vec<&Document> = corpus.documents.iter().filter(|d| d.covers(&task.name)).collect();
        let sentences = docs
            .iter()
            .flat_map(|d| &d.sentences)
            .filter(|s| s.labels.contains_key(&task.name))
            .count();
        let mut counts = vec![0usize; task.k()];
        for d in &docs {
            for s in &d.sentences {
                if let Some(l) = s.labels.get(&task.name) {
                    for &id in l.ids() {
                        counts[id] += 1;
                    }
                }
            }
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        rows.push(TaskStats {
            task: task.name.clone(),
            kind: task.kind,
            documents: docs.len(),
            sentences,
            k: task.k(),
            imbalance: imbalance_ratio(&counts).ok(),
        });
    }
    Ok(rows)
}
