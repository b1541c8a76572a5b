use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Architecture, Checkpoint, CheckpointMeta};
use super::net::{forward_logit, loss_and_gradients, Example};
use super::{sigmoid, Blocks, ModelParams, TrainConfig};
use crate::attnfeat::{compute_attention, extract_span_feature, AttentionProvider, SentKey};
use crate::corpus::{Document, MAX_SENTENCE_WORDS};
use crate::error::{Error, Result};
use crate::hash::combine;
use crate::labelgen::{Polarity, SpanLabel};

/// Labels needed per polarity before training starts.
pub const MIN_LABELS_PER_CLASS: usize = 10;

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Blocks<f64>,
    pub v: Blocks<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(input_channels: usize) -> Self {
        AdamState {
            m: Blocks::filled(input_channels, 0.0),
            v: Blocks::filled(input_channels, 0.0),
            t: 0,
        }
    }
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &[Example],
    config: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    for ex in batch {
        if ex.label != 0.0 && ex.label != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "label {} is not 0 or 1",
                ex.label
            )));
        }
        params.check_feature(&ex.feature)?;
    }
    let (loss, grads) = loss_and_gradients(&params.blocks, params.input_channels, batch);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    for (name, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    adam.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(adam.t as i32);
    let c2 = 1.0 - b2.powi(adam.t as i32);
    let blocks = params
        .blocks
        .iter_mut()
        .zip(adam.m.iter_mut())
        .zip(adam.v.iter_mut())
        .zip(grads.iter());
    for ((((name, p), (_, m)), (_, v)), (_, g)) in blocks {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let step = config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_eps);
            let next = (f64::from(p[i]) - step) as f32;
            if !next.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            p[i] = next;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ValidationMetrics {
    pub fn from_counts(true_pos: usize, predicted: usize, actual: usize) -> Self {
        let precision = if predicted == 0 {
            0.0
        } else {
            true_pos as f64 / predicted as f64
        };
        let recall = if actual == 0 {
            0.0
        } else {
            true_pos as f64 / actual as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ValidationMetrics {
            precision,
            recall,
            f1,
        }
    }
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_p: f64,
    pub val_r: f64,
    pub val_f1: f64,
}

/// Stops the first time validation F1 drops below the previous epoch's and
/// remembers the best epoch (earliest on ties).
#[derive(Debug, Clone, Default)]
pub struct EarlyStopping {
    prev: Option<f64>,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, f1: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, best)| f1 > best);
        if improved {
            self.best = Some((epoch, f1));
        }
        let stop = self.prev.is_some_and(|prev| f1 < prev);
        self.prev = Some(f1);
        (improved, stop)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochReport>,
    /// Labels skipped because they reach past the sentence truncation limit.
    pub dropped_truncated: usize,
}

/// Runs the epoch loop with a caller-supplied validation routine.
pub fn train_with_validator<V>(
    train_set: &[Example],
    init: ModelParams,
    config: &TrainConfig,
    mut validate: V,
) -> Result<TrainOutcome>
where
    V: FnMut(usize, &ModelParams) -> Result<ValidationMetrics>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut params = init;
    let mut adam = AdamState::new(params.input_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[config.seed, 2]));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::default();
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            loss_sum += train_step(&mut params, &mut adam, &batch, config)? * chunk.len() as f64;
        }
        let metrics = validate(epoch, &params)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_p: metrics.precision,
            val_r: metrics.recall,
            val_f1: metrics.f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val P {:.4} R {:.4} F1 {:.4}",
            report.train_loss,
            report.val_p,
            report.val_r,
            report.val_f1
        );
        epochs.push(report);
        let (improved, stop) = stopper.observe(epoch, metrics.f1);
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }

    let (best_epoch, val_f1) = stopper.best().unwrap_or((0, 0.0));
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                architecture: Architecture::for_params(&best),
                train_config: config.clone(),
                best_epoch,
                val_f1,
            },
            params: best,
        },
        epochs,
        dropped_truncated: 0,
    })
}

/// Examples grouped by document, in first-seen document order.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub by_doc: Vec<(String, Vec<Example>)>,
    pub dropped_truncated: usize,
    pub channels: usize,
}

/// Crops the feature of every label. Sentences are encoded once each.
pub fn build_examples(
    docs: &[Document],
    labels: &[SpanLabel],
    provider: &dyn AttentionProvider,
) -> Result<FeatureSet> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut dropped = 0;
    let mut groups: BTreeMap<SentKey, Vec<(usize, &SpanLabel)>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        if label.span.end > MAX_SENTENCE_WORDS {
            dropped += 1;
            continue;
        }
        groups
            .entry(SentKey::new(label.doc_id.clone(), label.span.sent_idx))
            .or_default()
            .push((i, label));
    }
    if dropped > 0 {
        log::warn!("{dropped} label(s) lie beyond the {MAX_SENTENCE_WORDS}-word truncation and were dropped");
    }

    let groups: Vec<_> = groups.into_iter().collect();
    let results: Vec<Result<Vec<(usize, Example)>>> = groups
        .par_iter()
        .map(|(key, items)| {
            let doc = by_id
                .get(key.doc_id.as_str())
                .ok_or_else(|| Error::MissingKey(key.to_string()))?;
            let sentence = doc
                .sentences
                .get(key.sent_idx)
                .ok_or_else(|| Error::MissingKey(key.to_string()))?;
            let tensor = compute_attention(provider, key, sentence)?;
            items
                .iter()
                .map(|&(i, l)| {
                    Ok((
                        i,
                        Example {
                            feature: extract_span_feature(&tensor, &l.span)?,
                            label: l.polarity.target(),
                        },
                    ))
                })
                .collect()
        })
        .collect();

    let mut missing = Vec::new();
    let mut examples: Vec<(usize, Example)> = Vec::with_capacity(labels.len());
    for (r, (key, _)) in results.into_iter().zip(&groups) {
        match r {
            Ok(v) => examples.extend(v),
            Err(Error::MissingKey(_)) => missing.push(key.to_string()),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }
    examples.sort_by_key(|(i, _)| *i);

    let mut by_doc: Vec<(String, Vec<Example>)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, ex) in examples {
        let doc_id = &labels[i].doc_id;
        let idx = *slot.entry(doc_id.clone()).or_insert_with(|| {
            by_doc.push((doc_id.clone(), Vec::new()));
            by_doc.len() - 1
        });
        by_doc[idx].1.push(ex);
    }
    Ok(FeatureSet {
        by_doc,
        dropped_truncated: dropped,
        channels: provider.channels(),
    })
}

/// Seeded document-wise split; returns the validation document ids.
pub fn split_documents(doc_ids: &[String], fraction: f64, seed: u64) -> Result<HashSet<String>> {
    let mut ids: Vec<&String> = doc_ids.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a document-wise validation split needs at least 2 labeled documents, got {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(combine(&[seed, 3]));
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    Ok(ids.into_iter().take(n_val).cloned().collect())
}

fn validation_metrics(params: &ModelParams, set: &[Example], threshold: f64) -> ValidationMetrics {
    let predicted_pos: Vec<bool> = set
        .par_iter()
        .map(|ex| {
            sigmoid(forward_logit(
                &params.blocks,
                params.input_channels,
                &ex.feature,
            )) >= threshold
        })
        .collect();
    let mut tp = 0;
    let mut predicted = 0;
    let mut actual = 0;
    for (ex, &pos) in set.iter().zip(&predicted_pos) {
        let gold = ex.label == 1.0;
        tp += usize::from(pos && gold);
        predicted += usize::from(pos);
        actual += usize::from(gold);
    }
    ValidationMetrics::from_counts(tp, predicted, actual)
}

/// Trains the span classifier on silver labels with early stopping on validation F1.
pub fn train(
    docs: &[Document],
    labels: &[SpanLabel],
    provider: &dyn AttentionProvider,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let positives = labels
        .iter()
        .filter(|l| l.polarity == Polarity::Positive)
        .count();
    let negatives = labels.len() - positives;
    if positives < MIN_LABELS_PER_CLASS || negatives < MIN_LABELS_PER_CLASS {
        return Err(Error::InsufficientLabels {
            min: MIN_LABELS_PER_CLASS,
            positives,
            negatives,
        });
    }
    if let Some(l) = labels
        .iter()
        .find(|l| l.span.len() > config.k_max || l.span.len() < 2)
    {
        return Err(Error::InvalidArgument(format!(
            "label {}#{} [{}, {}) has length outside 2..={}",
            l.doc_id, l.span.sent_idx, l.span.start, l.span.end, config.k_max
        )));
    }

    let features = build_examples(docs, labels, provider)?;
    let doc_ids: Vec<String> = features.by_doc.iter().map(|(id, _)| id.clone()).collect();
    let val_ids = split_documents(&doc_ids, config.validation_fraction, config.seed)?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (id, examples) in features.by_doc {
        if val_ids.contains(&id) {
            val_set.extend(examples);
        } else {
            train_set.extend(examples);
        }
    }
    log::info!(
        "training on {} spans, validating on {} spans from {} documents",
        train_set.len(),
        val_set.len(),
        val_ids.len()
    );

    let init = ModelParams::init(features.channels, config.k_max, combine(&[config.seed, 1]));
    let threshold = config.decision_threshold;
    let mut outcome = train_with_validator(&train_set, init, config, |_, params| {
        Ok(validation_metrics(params, &val_set, threshold))
    })?;
    outcome.dropped_truncated = features.dropped_truncated;
    Ok(outcome)
}
