//! Silver label generation.
//!
//! Positive labels are *core phrases*: maximal word patterns that repeat
//! inside a single document. Negatives are drawn uniformly from the
//! remaining candidate spans. [`gazetteer_match`] is the context-agnostic
//! dictionary labeler kept as the distant-supervision baseline.

use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Document, Stopwords};
use crate::error::{Error, Result};
use crate::jsonl;

/// A multi-word interval `[start, end)` inside one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub sent_idx: usize,
    pub start: usize,
    pub end: usize,
    pub words: Vec<String>,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn key(&self) -> (usize, usize, usize) {
        (self.sent_idx, self.start, self.end)
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.sent_idx == other.sent_idx && self.start < other.end && other.start < self.end
    }

    /// Builds the span over `doc.sentences[sent_idx].words[start..end]`.
    pub fn in_document(doc: &Document, sent_idx: usize, start: usize, end: usize) -> Result<Span> {
        let sentence = doc.sentences.get(sent_idx).ok_or_else(|| {
            Error::InvalidArgument(format!("document {:?} has no sentence {sent_idx}", doc.id))
        })?;
        if start >= end || end > sentence.len() {
            return Err(Error::SpanOutOfBounds {
                start,
                end,
                n_words: sentence.len(),
            });
        }
        Ok(Span {
            sent_idx,
            start,
            end,
            words: sentence.words[start..end].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

impl Polarity {
    pub fn target(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Core,
    Gazetteer,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpanLabel {
    pub doc_id: String,
    pub span: Span,
    pub polarity: Polarity,
    pub source: LabelSource,
}

/// Knobs for core-phrase mining.
#[derive(Debug, Clone)]
pub struct MiningOptions<'a> {
    pub min_freq: usize,
    pub k_max: usize,
    pub stopwords: &'a Stopwords,
}

impl Default for MiningOptions<'static> {
    fn default() -> Self {
        MiningOptions {
            min_freq: 2,
            k_max: 6,
            stopwords: Stopwords::bundled(),
        }
    }
}

impl MiningOptions<'_> {
    fn validate(&self) -> Result<()> {
        if self.min_freq < 2 {
            return Err(Error::InvalidArgument(format!(
                "min_freq must be at least 2, got {}",
                self.min_freq
            )));
        }
        if self.k_max < 2 {
            return Err(Error::InvalidArgument(format!(
                "k_max must be at least 2, got {}",
                self.k_max
            )));
        }
        Ok(())
    }

    /// Boundary-stopword, punctuation and numeric filter applied to every candidate pattern.
    pub fn is_informative(&self, pattern: &[&str]) -> bool {
        let (Some(first), Some(last)) = (pattern.first(), pattern.last()) else {
            return false;
        };
        !self.stopwords.contains(first)
            && !self.stopwords.contains(last)
            && pattern
                .iter()
                .all(|t| !corpus::is_punctuation(t) && !corpus::is_numeric(t))
    }
}

/// A maximal repeated pattern together with its document word positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorePattern {
    pub words: Vec<String>,
    pub positions: Vec<usize>,
}

/// Occurrence positions of every n-gram (`2 <= n <= k_max`) reaching `min_freq`.
///
/// Counting stops at the first length where nothing is frequent: a frequent
/// n-gram always has a frequent (n-1)-gram prefix.
fn frequent_ngrams<'w>(
    words: &'w [&'w str],
    min_freq: usize,
    k_max: usize,
) -> HashMap<&'w [&'w str], Vec<usize>> {
    let mut frequent: HashMap<&[&str], Vec<usize>> = HashMap::new();
    for n in 2..=k_max.min(words.len()) {
        let mut counts: HashMap<&[&str], Vec<usize>> = HashMap::new();
        for (i, gram) in words.windows(n).enumerate() {
            counts.entry(gram).or_default().push(i);
        }
        let before = frequent.len();
        frequent.extend(counts.into_iter().filter(|(_, pos)| pos.len() >= min_freq));
        if frequent.len() == before {
            break;
        }
    }
    frequent
}

/// Mines the maximal repeated informative patterns of a document.
///
/// A pattern is *valid* when it occurs at least `min_freq` times in the
/// document word sequence (occurrences may overlap and cross sentence
/// boundaries) and passes [`MiningOptions::is_informative`]. A valid pattern
/// is returned unless it is a contiguous sub-sequence of a longer valid
/// pattern of length at most `k_max`. Output is sorted by first position.
pub fn core_patterns(doc: &Document, opts: &MiningOptions) -> Result<Vec<CorePattern>> {
    opts.validate()?;
    let words = doc.words();
    let n_words = words.len();
    if n_words < 4 {
        return Ok(Vec::new());
    }
    let frequent = frequent_ngrams(&words, opts.min_freq, opts.k_max);
    let is_valid = |gram: &[&str]| frequent.contains_key(gram) && opts.is_informative(gram);

    let mut out = Vec::new();
    for (gram, positions) in &frequent {
        if !opts.is_informative(gram) {
            continue;
        }
        let n = gram.len();
        let suppressed = positions.iter().any(|&i| {
            let lo = (i + n).saturating_sub(opts.k_max);
            (lo..=i).any(|a| {
                let hi = (a + opts.k_max).min(n_words);
                (i + n..=hi).any(|b| b - a > n && is_valid(&words[a..b]))
            })
        });
        if !suppressed {
            out.push(CorePattern {
                words: gram.iter().map(|w| w.to_string()).collect(),
                positions: positions.clone(),
            });
        }
    }
    out.sort_by(|a, b| {
        a.positions[0]
            .cmp(&b.positions[0])
            .then(a.words.len().cmp(&b.words.len()))
    });
    Ok(out)
}

/// Positive core-phrase labels: every occurrence of a core pattern lying inside one sentence.
pub fn mine_core_phrases_with(doc: &Document, opts: &MiningOptions) -> Result<Vec<SpanLabel>> {
    let mut labels = Vec::new();
    for pattern in core_patterns(doc, opts)? {
        let n = pattern.words.len();
        for &pos in &pattern.positions {
            let (Some((s0, start)), Some((s1, _))) = (doc.locate(pos), doc.locate(pos + n - 1))
            else {
                continue;
            };
            if s0 != s1 {
                continue;
            }
            labels.push(SpanLabel {
                doc_id: doc.id.clone(),
                span: Span {
                    sent_idx: s0,
                    start,
                    end: start + n,
                    words: pattern.words.clone(),
                },
                polarity: Polarity::Positive,
                source: LabelSource::Core,
            });
        }
    }
    labels.sort_by_key(|l| l.span.key());
    labels.dedup_by(|a, b| a.span.key() == b.span.key());
    Ok(labels)
}

/// [`mine_core_phrases_with`] using the bundled stopword list.
pub fn mine_core_phrases(doc: &Document, min_freq: usize, k_max: usize) -> Result<Vec<SpanLabel>> {
    mine_core_phrases_with(
        doc,
        &MiningOptions {
            min_freq,
            k_max,
            stopwords: Stopwords::bundled(),
        },
    )
}

/// Every candidate span key `(sent_idx, start, end)` of length `2..=k_max`, ordered.
pub fn candidate_span_keys(doc: &Document, k_max: usize) -> Vec<(usize, usize, usize)> {
    let mut keys = Vec::new();
    for (s, sentence) in doc.sentences.iter().enumerate() {
        let n = sentence.len();
        for start in 0..n {
            for end in start + 2..=(start + k_max).min(n) {
                keys.push((s, start, end));
            }
        }
    }
    keys
}

/// Draws `min(|positives|, available)` negative spans uniformly without replacement.
pub fn sample_negatives(
    doc: &Document,
    positives: &[SpanLabel],
    k_max: usize,
    seed: u64,
) -> Vec<SpanLabel> {
    if positives.is_empty() {
        return Vec::new();
    }
    let taken: HashSet<(usize, usize, usize)> = positives.iter().map(|l| l.span.key()).collect();
    let candidates: Vec<_> = candidate_span_keys(doc, k_max)
        .into_iter()
        .filter(|k| !taken.contains(k))
        .collect();
    let amount = taken.len().min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), amount).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let (sent_idx, start, end) = candidates[i];
            SpanLabel {
                doc_id: doc.id.clone(),
                span: Span {
                    sent_idx,
                    start,
                    end,
                    words: doc.sentences[sent_idx].words[start..end].to_vec(),
                },
                polarity: Polarity::Negative,
                source: LabelSource::Sampled,
            }
        })
        .collect()
}

/// A set of multi-word phrases, stored tokenized.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashSet<Vec<String>>,
    max_len: usize,
}

impl Gazetteer {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for p in phrases {
            let tokens = corpus::tokenize_words(p.as_ref());
            if tokens.len() >= 2 {
                g.max_len = g.max_len.max(tokens.len());
                g.entries.insert(tokens);
            }
        }
        g
    }

    /// Gazetteer file: one phrase per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Gazetteer::new(
            text.lines().filter(|l| !l.trim().is_empty()),
        ))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, tokens: &[String]) -> bool {
        self.entries.contains(tokens)
    }
}

/// Context-agnostic dictionary matching inside single sentences.
///
/// All matches are collected, then accepted longest-first (leftmost on equal
/// length); a match contained in an already accepted one is dropped.
pub fn gazetteer_match(doc: &Document, gazetteer: &Gazetteer, k_max: usize) -> Vec<SpanLabel> {
    let max_len = gazetteer.max_len.min(k_max);
    let mut labels = Vec::new();
    for (s, sentence) in doc.sentences.iter().enumerate() {
        let words = &sentence.words;
        let mut matches = Vec::new();
        for start in 0..words.len() {
            for end in start + 2..=(start + max_len).min(words.len()) {
                if gazetteer.contains(&words[start..end]) {
                    matches.push((start, end));
                }
            }
        }
        matches.sort_by_key(|&(start, end)| (Reverse(end - start), start));
        let mut accepted: Vec<(usize, usize)> = Vec::new();
        for (start, end) in matches {
            if accepted.iter().any(|&(a, b)| a <= start && end <= b) {
                continue;
            }
            accepted.push((start, end));
        }
        accepted.sort_unstable();
        labels.extend(accepted.into_iter().map(|(start, end)| SpanLabel {
            doc_id: doc.id.clone(),
            span: Span {
                sent_idx: s,
                start,
                end,
                words: words[start..end].to_vec(),
            },
            polarity: Polarity::Positive,
            source: LabelSource::Gazetteer,
        }));
    }
    labels
}

/// Unions label sets of one document; on identical spans the earlier source in
/// `Core < Gazetteer < Sampled` order wins and positives beat negatives.
pub fn merge_labels(sets: impl IntoIterator<Item = Vec<SpanLabel>>) -> Vec<SpanLabel> {
    let mut all: Vec<SpanLabel> = sets.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        (&a.doc_id, a.span.key(), a.polarity, a.source).cmp(&(
            &b.doc_id,
            b.span.key(),
            b.polarity,
            b.source,
        ))
    });
    all.dedup_by(|a, b| a.doc_id == b.doc_id && a.span.key() == b.span.key());
    all
}

/// One line of the label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub sent_idx: usize,
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
    pub source: LabelSource,
}

impl From<&SpanLabel> for LabelRecord {
    fn from(l: &SpanLabel) -> Self {
        LabelRecord {
            doc_id: l.doc_id.clone(),
            sent_idx: l.span.sent_idx,
            start: l.span.start,
            end: l.span.end,
            polarity: l.polarity,
            source: l.source,
        }
    }
}

pub fn write_labels(path: &Path, labels: &[SpanLabel]) -> Result<()> {
    let records: Vec<LabelRecord> = labels.iter().map(LabelRecord::from).collect();
    jsonl::write(path, &records)
}

/// Reads a label file and resolves each record against `docs`.
pub fn read_labels(path: &Path, docs: &[Document]) -> Result<Vec<SpanLabel>> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    jsonl::read::<LabelRecord>(path)?
        .into_iter()
        .map(|r| {
            let doc = by_id.get(r.doc_id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("label refers to unknown document {:?}", r.doc_id))
            })?;
            Ok(SpanLabel {
                span: Span::in_document(doc, r.sent_idx, r.start, r.end)?,
                doc_id: r.doc_id,
                polarity: r.polarity,
                source: r.source,
            })
        })
        .collect()
}
