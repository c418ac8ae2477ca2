//! Shared sentence encoder: per-sentence embedding, optional embedding
//! augmentations, and a bidirectional LSTM contextualizer.

pub mod embedder;
pub mod lstm;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::nn::{add_into, Param, ParamGroup, Parameters};

pub use embedder::{
    apply_freeze_policy, embed_text, tokenize, EmbedTrace, FreezePolicy, FreezeSpec, SentenceEmbedder, ToyEmbedder,
    ToyEmbedderConfig,
};
pub use lstm::{BiLstm, Lstm};

/// Which augmentations are concatenated onto each sentence embedding, in
/// this order: vanilla positional, sinusoidal positional, document
/// embedding, document arithmetic, headline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentMask {
    pub positional: bool,
    pub sinusoidal: bool,
    pub document: bool,
    pub arithmetic: bool,
    pub headline: bool,
}

impl AugmentMask {
    pub fn none() -> Self {
        AugmentMask::default()
    }

    pub fn from_bits(bits: u8) -> Self {
        AugmentMask {
            positional: bits & 1 != 0,
            sinusoidal: bits & 2 != 0,
            document: bits & 4 != 0,
            arithmetic: bits & 8 != 0,
            headline: bits & 16 != 0,
        }
    }

    /// All 32 combinations.
    pub fn all() -> impl Iterator<Item = AugmentMask> {
        (0u8..32).map(AugmentMask::from_bits)
    }

    pub fn needs_document_embedding(self) -> bool {
        self.document || self.arithmetic
    }

    /// Row width of the concatenated bundle.
    pub fn width(self, d: usize, d_p: usize) -> usize {
        d + d_p * (self.positional as usize + self.sinusoidal as usize)
            + d * (self.document as usize + 2 * self.arithmetic as usize + self.headline as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalVariant {
    Vanilla,
    Sinusoidal,
}

/// Standard sin/cos scheme over sentence positions:
/// row p, column 2i = sin(p / 10000^(2i/d_p)), column 2i+1 = cos(same).
pub fn sinusoidal_positions(n: usize, d_p: usize) -> Result<Vec<Vec<f64>>> {
    if d_p % 2 != 0 {
        return Err(Error::Shape(format!("sinusoidal width must be even, got {d_p}")));
    }
    Ok((0..n)
        .map(|p| {
            let mut row = vec![0.0; d_p];
            for i in 0..d_p / 2 {
                let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d_p as f64);
                row[2 * i] = angle.sin();
                row[2 * i + 1] = angle.cos();
            }
            row
        })
        .collect())
}

/// Position embeddings for `n` sentences. The vanilla variant reads rows of a
/// learned lookup table.
pub fn positional_embeddings(
    n: usize,
    d_p: usize,
    variant: PositionalVariant,
    table: Option<&Param>,
) -> Result<Vec<Vec<f64>>> {
    match variant {
        PositionalVariant::Sinusoidal => sinusoidal_positions(n, d_p),
        PositionalVariant::Vanilla => {
            let table = table.ok_or_else(|| Error::validation("vanilla positions need a table"))?;
            if table.cols() != d_p {
                return Err(Error::Shape(format!("position table width {} != {d_p}", table.cols())));
            }
            if n > table.rows() {
                return Err(Error::Shape(format!(
                    "position {} beyond table capacity {}",
                    n - 1,
                    table.rows()
                )));
            }
            Ok((0..n).map(|p| table.row(p).to_vec()).collect())
        }
    }
}

/// Attention pooling with a single learned query: `w = softmax(q·S_j)`,
/// `D = Σ_j w_j S_j`. Returns `(D, w)`.
pub fn document_embedding(s: &[Vec<f64>], query: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.is_empty() {
        return Err(Error::Degenerate("document embedding of zero sentences".into()));
    }
    let d = query.len();
    if s.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("sentence width differs from query width {d}")));
    }
    let scores: Vec<f64> = s.iter().map(|r| r.iter().zip(query).map(|(a, b)| a * b).sum()).collect();
    let w = softmax(&scores);
    let mut pooled = vec![0.0; d];
    for (row, wj) in s.iter().zip(&w) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += wj * v;
        }
    }
    Ok((pooled, w))
}

/// `[D ∘ S_j ; D − S_j]`.
pub fn document_arithmetic(doc: &[f64], sentence: &[f64]) -> Result<Vec<f64>> {
    if doc.len() != sentence.len() {
        return Err(Error::Shape(format!(
            "document width {} vs sentence width {}",
            doc.len(),
            sentence.len()
        )));
    }
    let mut out: Vec<f64> = doc.iter().zip(sentence).map(|(a, b)| a * b).collect();
    out.extend(doc.iter().zip(sentence).map(|(a, b)| a - b));
    Ok(out)
}

/// Row `j` is the embedder's summary vector for sentence `j`.
pub fn embed_sentences(doc: &Document, embedder: &dyn SentenceEmbedder) -> Vec<Vec<f64>> {
    doc.sentences.iter().map(|s| embed_text(embedder, &s.text).0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embedder: ToyEmbedderConfig,
    pub augment: AugmentMask,
    pub positional_dim: usize,
    pub max_sentences: usize,
    /// Hidden width per LSTM direction; the contextualized width is twice this.
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedder: ToyEmbedderConfig::default(),
            augment: AugmentMask::none(),
            positional_dim: 64,
            max_sentences: 200,
            hidden: 256,
        }
    }
}

#[derive(Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedder: Box<dyn SentenceEmbedder>,
    pub positions: Param,
    pub query: Param,
    pub context: BiLstm,
}

pub struct EncoderTrace {
    sentence_traces: Vec<EmbedTrace>,
    headline_trace: Option<EmbedTrace>,
    s: Vec<Vec<f64>>,
    doc: Option<(Vec<f64>, Vec<f64>)>,
    lstm: lstm::BiLstmTrace,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let embedder = Box::new(ToyEmbedder::new(config.embedder.clone(), seed));
        Encoder::with_embedder(config, embedder, seed)
    }

    pub fn with_embedder(config: EncoderConfig, embedder: Box<dyn SentenceEmbedder>, seed: u64) -> Self {
        let d = embedder.dim();
        let width = config.augment.width(d, config.positional_dim);
        Encoder {
            positions: Param::uniform(
                "encoder.positions",
                &[config.max_sentences, config.positional_dim],
                0.1,
                seed,
                ParamGroup::Other,
            ),
            query: Param::zeros("encoder.attention.query", &[d], ParamGroup::Other),
            context: BiLstm::new("encoder.context", width, config.hidden, seed),
            embedder,
            config,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.context.output_dim()
    }

    pub fn bundle_width(&self) -> usize {
        self.config.augment.width(self.embedder.dim(), self.config.positional_dim)
    }

    /// Concatenated per-sentence inputs to the contextualizer.
    pub fn bundle(&self, doc: &Document) -> Result<Vec<Vec<f64>>> {
        Ok(self.build_bundle(doc)?.0)
    }

    fn build_bundle(&self, doc: &Document) -> Result<(Vec<Vec<f64>>, EncoderTrace)> {
        let n = doc.len();
        if n == 0 {
            return Err(Error::Degenerate(format!("document `{}` has no sentences", doc.doc_id)));
        }
        if n > self.config.max_sentences {
            return Err(Error::validation(format!(
                "document `{}` has {n} sentences, limit is {}",
                doc.doc_id, self.config.max_sentences
            )));
        }
        let mask = self.config.augment;
        let d = self.embedder.dim();
        let d_p = self.config.positional_dim;
        let (s, sentence_traces): (Vec<Vec<f64>>, Vec<EmbedTrace>) =
            doc.sentences.iter().map(|x| embed_text(self.embedder.as_ref(), &x.text)).unzip();
        let (headline, headline_trace) = if mask.headline {
            match &doc.headline {
                Some(h) => {
                    let (v, t) = embed_text(self.embedder.as_ref(), h);
                    (v, Some(t))
                }
                None => (vec![0.0; d], None),
            }
        } else {
            (Vec::new(), None)
        };
        let docemb = if mask.needs_document_embedding() {
            Some(document_embedding(&s, &self.query.value)?)
        } else {
            None
        };
        let vanilla = if mask.positional {
            positional_embeddings(n, d_p, PositionalVariant::Vanilla, Some(&self.positions))?
        } else {
            Vec::new()
        };
        let sinus = if mask.sinusoidal {
            sinusoidal_positions(n, d_p)?
        } else {
            Vec::new()
        };
        let mut rows = Vec::with_capacity(n);
        for j in 0..n {
            let mut row = s[j].clone();
            if mask.positional {
                row.extend_from_slice(&vanilla[j]);
            }
            if mask.sinusoidal {
                row.extend_from_slice(&sinus[j]);
            }
            if let Some((dv, _)) = &docemb {
                if mask.document {
                    row.extend_from_slice(dv);
                }
                if mask.arithmetic {
                    row.extend(document_arithmetic(dv, &s[j])?);
                }
            }
            if mask.headline {
                row.extend_from_slice(&headline);
            }
            rows.push(row);
        }
        let trace = EncoderTrace {
            sentence_traces,
            headline_trace,
            s,
            doc: docemb,
            lstm: Default::default(),
        };
        Ok((rows, trace))
    }

    /// Contextualized rows, one per sentence.
    pub fn forward(&self, doc: &Document) -> Result<(Vec<Vec<f64>>, EncoderTrace)> {
        let (rows, mut trace) = self.build_bundle(doc)?;
        let (out, lt) = self.context.forward(&rows);
        trace.lstm = lt;
        Ok((out, trace))
    }

    pub fn backward(&mut self, trace: &EncoderTrace, d_out: &[Vec<f64>]) {
        let dx = self.context.backward(&trace.lstm, d_out);
        let mask = self.config.augment;
        let d = self.embedder.dim();
        let d_p = self.config.positional_dim;
        let n = trace.s.len();
        let mut ds: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut d_doc = vec![0.0; d];
        let mut d_head = vec![0.0; d];
        for (j, g) in dx.iter().enumerate() {
            let mut off = 0;
            add_into(&mut ds[j], &g[..d]);
            off += d;
            if mask.positional {
                if !self.positions.frozen {
                    let row = &mut self.positions.grad[j * d_p..(j + 1) * d_p];
                    add_into(row, &g[off..off + d_p]);
                }
                off += d_p;
            }
            if mask.sinusoidal {
                off += d_p;
            }
            if let Some((dv, _)) = &trace.doc {
                if mask.document {
                    add_into(&mut d_doc, &g[off..off + d]);
                    off += d;
                }
                if mask.arithmetic {
                    let (prod, diff) = (&g[off..off + d], &g[off + d..off + 2 * d]);
                    for c in 0..d {
                        d_doc[c] += prod[c] * trace.s[j][c] + diff[c];
                        ds[j][c] += prod[c] * dv[c] - diff[c];
                    }
                    off += 2 * d;
                }
            }
            if mask.headline {
                add_into(&mut d_head, &g[off..off + d]);
            }
        }
        if let Some((_, w)) = &trace.doc {
            // D = Σ w_j S_j with w = softmax(q·S_j)
            let gdot: Vec<f64> = trace.s.iter().map(|r| r.iter().zip(&d_doc).map(|(a, b)| a * b).sum()).collect();
            let mean: f64 = w.iter().zip(&gdot).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let dscore = w[j] * (gdot[j] - mean);
                for c in 0..d {
                    ds[j][c] += w[j] * d_doc[c] + dscore * self.query.value[c];
                    if !self.query.frozen {
                        self.query.grad[c] += dscore * trace.s[j][c];
                    }
                }
            }
        }
        if self.embedder.trainable_count() == 0 {
            return;
        }
        for (t, g) in trace.sentence_traces.iter().zip(&ds) {
            self.embedder.backward(t, g);
        }
        if let Some(t) = &trace.headline_trace {
            self.embedder.backward(t, &d_head);
        }
    }

    /// Freezes (or unfreezes) everything outside the sentence embedder.
    pub fn set_shared_layers_frozen(&mut self, frozen: bool) {
        self.positions.frozen = frozen;
        self.query.frozen = frozen;
        self.context.set_frozen(frozen);
    }
}

impl Parameters for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.embedder.visit(f);
        f(&self.positions);
        f(&self.query);
        self.context.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.embedder.visit_mut(f);
        f(&mut self.positions);
        f(&mut self.query);
        self.context.visit_mut(f);
    }
}
