//! Paraphrase augmentation of the training split through a pluggable
//! round-trip translator.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{fnv1a, named_rng};

/// Produces a paraphrase of `text` for a given sample index. Implementations
/// are deterministic in (text, their seed, sample index).
pub trait Augmenter: Send + Sync {
    fn paraphrase(&self, text: &str, sample: usize) -> Result<String>;
}

/// One direction of a round trip through a pivot language.
pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, temperature: f64, seed: u64, sample: usize) -> Result<String>;
}

pub struct Backtranslator {
    pub out: Box<dyn Translator>,
    pub back: Box<dyn Translator>,
    pub temperature: f64,
    pub seed: u64,
}

impl Augmenter for Backtranslator {
    fn paraphrase(&self, text: &str, sample: usize) -> Result<String> {
        let pivot = self.out.translate(text, self.temperature, self.seed, sample)?;
        self.back.translate(&pivot, self.temperature, self.seed, sample)
    }
}

/// Runs an external program per request: the text goes to stdin as one
/// UTF-8 line and the first stdout line is the translation. Sampling
/// settings are passed as `DISCOTASK_TEMPERATURE`, `DISCOTASK_SEED` and
/// `DISCOTASK_SAMPLE`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessTranslator {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Translator for ProcessTranslator {
    fn translate(&self, text: &str, temperature: f64, seed: u64, sample: usize) -> Result<String> {
        let fail = |m: String| Error::Augmenter(format!("`{}`: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("DISCOTASK_TEMPERATURE", temperature.to_string())
            .env("DISCOTASK_SEED", seed.to_string())
            .env("DISCOTASK_SAMPLE", sample.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().ok_or_else(|| fail("no stdin".into()))?;
            writeln!(stdin, "{}", text.replace('\n', " ")).map_err(|e| fail(e.to_string()))?;
        }
        let mut line = String::new();
        let stdout = child.stdout.take().ok_or_else(|| fail("no stdout".into()))?;
        BufReader::new(stdout).read_line(&mut line).map_err(|e| fail(e.to_string()))?;
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    }
}

const FILLERS: [&str; 12] = [
    "the", "a", "also", "reportedly", "then", "indeed", "said", "just", "still", "now", "that", "very",
];

/// Seeded token-level perturbation standing in for a translation round
/// trip. Each token is, with a temperature-dependent probability, replaced
/// by a filler word or swapped with its neighbour. At temperature 0 the
/// sample index is ignored, so every sample is the same (greedy) output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockAugmenter {
    pub temperature: f64,
    pub seed: u64,
}

impl MockAugmenter {
    pub fn new(temperature: f64, seed: u64) -> Self {
        MockAugmenter { temperature, seed }
    }

    pub fn edit_rate(&self) -> f64 {
        0.15 + 0.35 * (1.0 - (-self.temperature.max(0.0)).exp())
    }
}

impl Augmenter for MockAugmenter {
    fn paraphrase(&self, text: &str, sample: usize) -> Result<String> {
        let mut tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            return Ok(text.to_string());
        }
        let sample = if self.temperature > 0.0 { sample } else { 0 };
        let mut rng = named_rng(self.seed ^ fnv1a(text.as_bytes()), &format!("augment.sample{sample}"));
        let rate = self.edit_rate();
        let mut i = 0;
        while i < tokens.len() {
            if rng.gen::<f64>() < rate {
                if rng.gen::<f64>() < 0.7 || i + 1 == tokens.len() {
                    tokens[i] = FILLERS[rng.gen_range(0..FILLERS.len())].to_string();
                } else {
                    tokens.swap(i, i + 1);
                    i += 1;
                }
            }
            i += 1;
        }
        Ok(tokens.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmented {
    pub paraphrases: Vec<String>,
    /// Samples that failed and were skipped.
    pub failed: usize,
}

/// `n` paraphrases of one sentence; failing or empty samples are skipped
/// with a warning.
pub fn augment_sentence(text: &str, augmenter: &dyn Augmenter, n: usize) -> Result<Augmented> {
    if n == 0 {
        return Err(Error::validation("augmentation count must be at least 1"));
    }
    let mut out = Augmented {
        paraphrases: Vec::with_capacity(n),
        failed: 0,
    };
    for s in 0..n {
        match augmenter.paraphrase(text, s) {
            Ok(p) if !p.trim().is_empty() || text.trim().is_empty() => out.paraphrases.push(p),
            Ok(_) => {
                log::warn!("augmenter returned an empty paraphrase for sample {s}");
                out.failed += 1;
            }
            Err(e) => {
                log::warn!("augmentation sample {s} failed: {e}");
                out.failed += 1;
            }
        }
    }
    Ok(out)
}

fn paraphrase_document(doc: &Document, augmenter: &dyn Augmenter, sample: usize) -> Document {
    let mut copy = doc.clone();
    copy.doc_id = format!("{}#aug{}", doc.doc_id, sample + 1);
    for s in &mut copy.sentences {
        match augmenter.paraphrase(&s.text, sample) {
            Ok(p) if !p.trim().is_empty() => s.text = p,
            Ok(_) | Err(_) => log::warn!(
                "keeping original text for `{}` sentence {} (augmentation failed)",
                doc.doc_id,
                s.index
            ),
        }
    }
    copy
}

/// Appends `n` whole-document paraphrases of every training document, after
/// all original documents. Labels and sentence order are kept; dev and test
/// documents are untouched.
pub fn expand_training_set(corpus: &Corpus, augmenter: &dyn Augmenter, n: usize, execution: Execution) -> Result<Corpus> {
    if n == 0 {
        return Ok(corpus.clone());
    }
    let train: Vec<&Document> = corpus.documents_in(Split::Train).collect();
    let copies = execution.map(&train, |d| (0..n).map(|s| paraphrase_document(d, augmenter, s)).collect::<Vec<_>>());
    let mut documents = corpus.documents.clone();
    documents.extend(copies.into_iter().flatten());
    Corpus::new(corpus.tasks.clone(), documents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_deterministic_variants() {
        let m = MockAugmenter::new(1.0, 4);
        let text = "officials said the storm destroyed several homes on the coast";
        let a = augment_sentence(text, &m, 10).unwrap();
        assert_eq!(a.paraphrases.len(), 10);
        assert_eq!(a.failed, 0);
        assert_eq!(a, augment_sentence(text, &m, 10).unwrap());
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let m = MockAugmenter::new(0.0, 4);
        let a = augment_sentence("one two three four five six", &m, 5).unwrap();
        assert!(a.paraphrases.windows(2).all(|w| w[0] == w[1]));
    }

    struct Flaky;
    impl Augmenter for Flaky {
        fn paraphrase(&self, text: &str, sample: usize) -> Result<String> {
            if sample % 2 == 0 {
                Err(Error::Augmenter("down".into()))
            } else {
                Ok(text.to_uppercase())
            }
        }
    }

    #[test]
    fn failures_are_counted() {
        let a = augment_sentence("abc", &Flaky, 4).unwrap();
        assert_eq!(a.paraphrases.len(), 2);
        assert_eq!(a.failed, 2);
        assert!(augment_sentence("abc", &Flaky, 0).is_err());
    }
}
