//! Word-level attention tensors, span crops and attention providers.
//!
//! A tensor holds `L × H × N × N` row-stochastic attention weights for one
//! sentence, indexed `[layer][head][from_word][to_word]`. A span feature is
//! the square crop of all `C = H·L` maps over the span's words, with
//! channels flattened layer-major, head-minor (`c = layer * H + head`).

mod archive;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

pub use archive::{
    write_archive, write_archive_to, Archive, ArchiveEntry, ArchiveProvider, ARCHIVE_MAGIC,
    ARCHIVE_VERSION,
};
pub use synthetic::{
    generate_synthetic_corpus, planted_spans, PlantedParams, PlantedProvider, SynthConfig,
    SyntheticCorpus, SyntheticHashProvider,
};

use crate::corpus::SentenceTokens;
use crate::error::{Error, Result};
use crate::labelgen::Span;

pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_HEADS: usize = 12;

/// Tolerance on attention row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Identifies a sentence: `(doc_id, sent_idx)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentKey {
    pub doc_id: String,
    pub sent_idx: usize,
}

impl SentKey {
    pub fn new(doc_id: impl Into<String>, sent_idx: usize) -> Self {
        SentKey {
            doc_id: doc_id.into(),
            sent_idx,
        }
    }

    /// Archive index form: `doc_id`, a NUL byte, then the decimal sentence index.
    pub fn encode(&self) -> String {
        format!("{}\u{0}{}", self.doc_id, self.sent_idx)
    }

    pub fn decode(raw: &str) -> Result<Self> {
        let (doc, idx) = raw
            .rsplit_once('\u{0}')
            .ok_or_else(|| Error::Corrupt(format!("archive key {raw:?} lacks a separator")))?;
        let sent_idx = idx
            .parse()
            .map_err(|_| Error::Corrupt(format!("archive key {raw:?} has a bad sentence index")))?;
        Ok(SentKey::new(doc, sent_idx))
    }
}

impl fmt::Display for SentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.sent_idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub key: SentKey,
    pub n_words: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(
        key: SentKey,
        n_words: usize,
        n_layers: usize,
        n_heads: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let expected = n_layers * n_heads * n_words * n_words;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{key}: expected {n_layers}x{n_heads}x{n_words}x{n_words} = {expected} values, got {}",
                values.len()
            )));
        }
        Ok(AttentionTensor {
            key,
            n_words,
            n_layers,
            n_heads,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.n_layers * self.n_heads
    }

    #[inline]
    pub fn index(&self, layer: usize, head: usize, from: usize, to: usize) -> usize {
        ((layer * self.n_heads + head) * self.n_words + from) * self.n_words + to
    }

    #[inline]
    pub fn get(&self, layer: usize, head: usize, from: usize, to: usize) -> f32 {
        self.values[self.index(layer, head, from, to)]
    }

    pub fn row(&self, layer: usize, head: usize, from: usize) -> &[f32] {
        let start = self.index(layer, head, from, 0);
        &self.values[start..start + self.n_words]
    }

    /// Checks value range and that every row sums to one.
    pub fn validate(&self) -> Result<()> {
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for i in 0..self.n_words {
                    let row = self.row(l, h, i);
                    if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                        return Err(Error::Corrupt(format!(
                            "{}: attention value outside [0,1] at layer {l} head {h} row {i}",
                            self.key
                        )));
                    }
                    let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::Corrupt(format!(
                            "{}: row sum {sum} at layer {l} head {h} row {i}",
                            self.key
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The `C × k × k` crop of a tensor over one span.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanFeature {
    pub span: Span,
    pub channels: usize,
    pub size: usize,
    pub values: Vec<f32>,
}

impl SpanFeature {
    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[(channel * self.size + row) * self.size + col]
    }
}

/// Crops `tensor` to the span's words. No renormalization happens.
pub fn extract_span_feature(tensor: &AttentionTensor, span: &Span) -> Result<SpanFeature> {
    let k = span.end.saturating_sub(span.start);
    if span.end > tensor.n_words || span.start >= span.end {
        return Err(Error::SpanOutOfBounds {
            start: span.start,
            end: span.end,
            n_words: tensor.n_words,
        });
    }
    if k < 2 {
        return Err(Error::SpanTooShort {
            start: span.start,
            end: span.end,
            len: k,
        });
    }
    let channels = tensor.channels();
    let mut values = Vec::with_capacity(channels * k * k);
    for l in 0..tensor.n_layers {
        for h in 0..tensor.n_heads {
            for r in span.start..span.end {
                values.extend_from_slice(&tensor.row(l, h, r)[span.start..span.end]);
            }
        }
    }
    Ok(SpanFeature {
        span: span.clone(),
        channels,
        size: k,
        values,
    })
}

/// Source of word-level attention for sentences.
pub trait AttentionProvider: Send + Sync {
    fn n_layers(&self) -> usize;
    fn n_heads(&self) -> usize;

    /// Attention for an already truncated sentence.
    fn attention(&self, key: &SentKey, words: &[String]) -> Result<AttentionTensor>;

    fn channels(&self) -> usize {
        self.n_layers() * self.n_heads()
    }
}

/// Truncates the sentence to [`MAX_SENTENCE_WORDS`] and asks `provider` for its attention.
pub fn compute_attention(
    provider: &dyn AttentionProvider,
    key: &SentKey,
    sentence: &SentenceTokens,
) -> Result<AttentionTensor> {
    if sentence.is_empty() {
        return Err(Error::InvalidArgument(format!("{key}: empty sentence")));
    }
    let words = &sentence.words[..sentence.truncated_len()];
    let tensor = provider.attention(key, words)?;
    if tensor.n_words != words.len() {
        return Err(Error::ShapeMismatch(format!(
            "{key}: provider returned {} words, sentence has {}",
            tensor.n_words,
            words.len()
        )));
    }
    Ok(tensor)
}

/// Row-wise softmax of `logits` (row-major `n × n`) into `out`.
pub(crate) fn softmax_rows(logits: &[f64], n: usize, out: &mut Vec<f32>) {
    for row in logits.chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
}

/// Precomputed tensors held in memory, keyed by sentence.
#[derive(Debug, Clone, Default)]
pub struct MemoryProvider {
    n_layers: usize,
    n_heads: usize,
    tensors: HashMap<SentKey, AttentionTensor>,
}

impl MemoryProvider {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        MemoryProvider {
            n_layers,
            n_heads,
            tensors: HashMap::new(),
        }
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = AttentionTensor>) -> Result<Self> {
        let mut p = MemoryProvider::default();
        for t in tensors {
            p.insert(t)?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, tensor: AttentionTensor) -> Result<()> {
        if self.tensors.is_empty() && self.n_layers == 0 {
            self.n_layers = tensor.n_layers;
            self.n_heads = tensor.n_heads;
        }
        if tensor.n_layers != self.n_layers || tensor.n_heads != self.n_heads {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} maps, provider holds {}x{}",
                tensor.key, tensor.n_layers, tensor.n_heads, self.n_layers, self.n_heads
            )));
        }
        self.tensors.insert(tensor.key.clone(), tensor);
        Ok(())
    }

    pub fn get(&self, key: &SentKey) -> Option<&AttentionTensor> {
        self.tensors.get(key)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

impl AttentionProvider for MemoryProvider {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn attention(&self, key: &SentKey, _words: &[String]) -> Result<AttentionTensor> {
        self.tensors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }
}

/// Which provider to build, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Archive(PathBuf),
    SyntheticHash {
        seed: u64,
        n_layers: usize,
        n_heads: usize,
    },
    SyntheticPlanted {
        params: PlantedParams,
        spans: HashMap<SentKey, Vec<(usize, usize)>>,
    },
}

impl ProviderSpec {
    pub fn build(self) -> Result<Box<dyn AttentionProvider>> {
        Ok(match self {
            ProviderSpec::Archive(path) => Box::new(ArchiveProvider::open(&path)?),
            ProviderSpec::SyntheticHash {
                seed,
                n_layers,
                n_heads,
            } => Box::new(SyntheticHashProvider::new(seed, n_layers, n_heads)),
            ProviderSpec::SyntheticPlanted { params, spans } => {
                Box::new(PlantedProvider::new(params, spans))
            }
        })
    }
}
