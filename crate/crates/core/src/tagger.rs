//! Candidate enumeration, span scoring and decoding.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnfeat::{compute_attention, extract_span_feature, AttentionProvider, SentKey};
use crate::classifier::{forward_logit, sigmoid, ModelParams};
use crate::corpus::{Document, SentenceTokens};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::labelgen::Span;

/// A scored span.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub doc_id: String,
    pub span: Span,
    pub probability: f64,
    pub logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Decode {
    /// Every span at or above the threshold, overlaps allowed.
    #[default]
    #[serde(rename = "overlap")]
    Overlap,
    /// Repeatedly keep the most probable remaining span and drop everything overlapping it.
    #[serde(rename = "greedy-nonoverlap", alias = "greedy")]
    GreedyNonOverlap,
}

impl std::str::FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Decode::Overlap),
            "greedy" | "greedy-nonoverlap" => Ok(Decode::GreedyNonOverlap),
            other => Err(Error::InvalidArgument(format!(
                "unknown decode mode {other:?}"
            ))),
        }
    }
}

/// All spans of length `2..=min(k_max, N)`, ordered by `(start, end)`.
pub fn enumerate_spans(sentence: &SentenceTokens, sent_idx: usize, k_max: usize) -> Vec<Span> {
    let n = sentence.len();
    let mut spans = Vec::new();
    for start in 0..n {
        for end in start + 2..=(start + k_max).min(n) {
            spans.push(Span {
                sent_idx,
                start,
                end,
                words: sentence.words[start..end].to_vec(),
            });
        }
    }
    spans
}

/// Greedy non-overlapping selection; ties prefer the longer span, then the leftmost.
pub fn select_greedy(mut candidates: Vec<Prediction>) -> Vec<Prediction> {
    candidates.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(Ordering::Equal)
            .then(b.span.len().cmp(&a.span.len()))
            .then(a.span.start.cmp(&b.span.start))
    });
    let mut kept: Vec<Prediction> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| !k.span.overlaps(&c.span)) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|p| (p.span.start, p.span.end));
    kept
}

/// Tagging output plus the number of candidate spans skipped by truncation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TagOutput {
    pub predictions: Vec<Prediction>,
    pub skipped_truncated: usize,
}

pub struct Tagger<'a> {
    params: &'a ModelParams,
    provider: &'a dyn AttentionProvider,
    pub threshold: f64,
    pub decode: Decode,
}

impl<'a> Tagger<'a> {
    pub fn new(
        params: &'a ModelParams,
        provider: &'a dyn AttentionProvider,
        threshold: f64,
        decode: Decode,
    ) -> Result<Self> {
        if provider.channels() != params.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint expects {} channels, provider yields {}",
                params.input_channels,
                provider.channels()
            )));
        }
        Ok(Tagger {
            params,
            provider,
            threshold,
            decode,
        })
    }

    /// Scores every candidate span of a sentence, without thresholding.
    pub fn score_sentence(
        &self,
        doc_id: &str,
        sent_idx: usize,
        sentence: &SentenceTokens,
    ) -> Result<TagOutput> {
        let spans = enumerate_spans(sentence, sent_idx, self.params.k_max);
        let limit = sentence.truncated_len();
        let (inside, beyond): (Vec<Span>, Vec<Span>) =
            spans.into_iter().partition(|s| s.end <= limit);
        if inside.is_empty() {
            return Ok(TagOutput {
                predictions: Vec::new(),
                skipped_truncated: beyond.len(),
            });
        }
        let key = SentKey::new(doc_id, sent_idx);
        let tensor = compute_attention(self.provider, &key, sentence)?;
        let mut predictions = Vec::with_capacity(inside.len());
        for span in inside {
            let feature = extract_span_feature(&tensor, &span)?;
            let logit = forward_logit(&self.params.blocks, self.params.input_channels, &feature);
            predictions.push(Prediction {
                doc_id: doc_id.to_string(),
                span,
                probability: sigmoid(logit),
                logit,
            });
        }
        Ok(TagOutput {
            predictions,
            skipped_truncated: beyond.len(),
        })
    }

    /// Applies the threshold and decode mode to scored spans of one sentence.
    pub fn decide(&self, scored: Vec<Prediction>) -> Vec<Prediction> {
        let above: Vec<Prediction> = scored
            .into_iter()
            .filter(|p| p.probability >= self.threshold)
            .collect();
        match self.decode {
            Decode::Overlap => above,
            Decode::GreedyNonOverlap => select_greedy(above),
        }
    }

    pub fn tag_sentence(
        &self,
        doc_id: &str,
        sent_idx: usize,
        sentence: &SentenceTokens,
    ) -> Result<TagOutput> {
        let scored = self.score_sentence(doc_id, sent_idx, sentence)?;
        Ok(TagOutput {
            predictions: self.decide(scored.predictions),
            skipped_truncated: scored.skipped_truncated,
        })
    }

    pub fn tag_document(&self, doc: &Document) -> Result<TagOutput> {
        let mut out = TagOutput::default();
        for (s, sentence) in doc.sentences.iter().enumerate() {
            let t = self.tag_sentence(&doc.id, s, sentence)?;
            out.predictions.extend(t.predictions);
            out.skipped_truncated += t.skipped_truncated;
        }
        Ok(out)
    }

    /// Tags documents in parallel; output follows corpus order.
    pub fn tag_corpus(&self, docs: &[Document]) -> Result<TagOutput> {
        let parts: Vec<Result<TagOutput>> = docs.par_iter().map(|d| self.tag_document(d)).collect();
        let mut out = TagOutput::default();
        for part in parts {
            let part = part?;
            out.predictions.extend(part.predictions);
            out.skipped_truncated += part.skipped_truncated;
        }
        Ok(out)
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub sent_idx: usize,
    pub start: usize,
    pub end: usize,
    pub prob: f64,
    pub logit: f64,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        PredictionRecord {
            doc_id: p.doc_id.clone(),
            sent_idx: p.span.sent_idx,
            start: p.span.start,
            end: p.span.end,
            prob: p.probability,
            logit: p.logit,
        }
    }
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let records: Vec<PredictionRecord> = predictions.iter().map(PredictionRecord::from).collect();
    jsonl::write(path, &records)
}

/// Reads predictions and restores span words from the corpus.
pub fn read_predictions(path: &Path, docs: &[Document]) -> Result<Vec<Prediction>> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    jsonl::read::<PredictionRecord>(path)?
        .into_iter()
        .map(|r| {
            let doc = by_id.get(r.doc_id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("prediction for unknown document {:?}", r.doc_id))
            })?;
            Ok(Prediction {
                span: Span::in_document(doc, r.sent_idx, r.start, r.end)?,
                doc_id: r.doc_id,
                probability: r.prob,
                logit: r.logit,
            })
        })
        .collect()
}
