//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod cli_run;
pub mod eval_fixtures;

use std::collections::{BTreeSet, HashMap};

use phrasetag_core::attnfeat::{
    generate_synthetic_corpus, AttentionTensor, PlantedParams, PlantedProvider, SentKey,
    SpanFeature, SynthConfig,
};
use phrasetag_core::classifier::{
    loss_and_gradients, train, Blocks, Example, ModelParams, TrainConfig,
};
use phrasetag_core::corpus::{is_numeric, is_punctuation, Document, Stopwords};
use phrasetag_core::hash::doc_seed;
use phrasetag_core::labelgen::{mine_core_phrases, sample_negatives, Span};
use phrasetag_core::tagger::{Decode, Tagger};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Core-phrase oracle

/// Quadratic enumeration: counts every n-gram, filters, then drops any
/// pattern contained in another surviving-threshold pattern.
pub fn oracle_patterns(
    words: &[String],
    stop: &Stopwords,
    min_freq: usize,
    k_max: usize,
) -> BTreeSet<Vec<String>> {
    if words.len() < 4 {
        return BTreeSet::new();
    }
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for n in 2..=k_max {
        for i in 0..words.len().saturating_sub(n - 1) {
            *counts.entry(words[i..i + n].to_vec()).or_default() += 1;
        }
    }
    let informative = |p: &[String]| {
        !stop.contains(&p[0])
            && !stop.contains(&p[p.len() - 1])
            && p.iter().all(|t| !is_punctuation(t) && !is_numeric(t))
    };
    let valid: Vec<Vec<String>> = counts
        .into_iter()
        .filter(|(p, c)| *c >= min_freq && informative(p))
        .map(|(p, _)| p)
        .collect();
    let contains = |big: &[String], small: &[String]| {
        big.len() > small.len() && big.windows(small.len()).any(|w| w == small)
    };
    valid
        .iter()
        .filter(|p| !valid.iter().any(|q| contains(q, p)))
        .cloned()
        .collect()
}

/// Label keys `(sent_idx, start, end)` for every in-sentence occurrence of the oracle patterns.
pub fn oracle_labels(
    doc: &Document,
    stop: &Stopwords,
    min_freq: usize,
    k_max: usize,
) -> BTreeSet<(usize, usize, usize)> {
    let patterns = oracle_patterns(
        &doc.words()
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>(),
        stop,
        min_freq,
        k_max,
    );
    let mut out = BTreeSet::new();
    for (s, sentence) in doc.sentences.iter().enumerate() {
        for p in &patterns {
            let n = p.len();
            for start in 0..sentence.len().saturating_sub(n - 1) {
                if sentence.words[start..start + n] == p[..] {
                    out.insert((s, start, start + n));
                }
            }
        }
    }
    out
}

/// A random document over `vocab`, split into sentences at random points.
pub fn random_document(rng: &mut ChaCha8Rng, id: &str, vocab: &[&str], max_len: usize) -> Document {
    let len = rng.random_range(0..=max_len);
    let mut sentences = vec![Vec::new()];
    for _ in 0..len {
        if !sentences.last().unwrap().is_empty() && rng.random_bool(0.08) {
            sentences.push(Vec::new());
        }
        sentences
            .last_mut()
            .unwrap()
            .push(vocab[rng.random_range(0..vocab.len())].to_string());
    }
    sentences.retain(|s| !s.is_empty());
    Document::from_sentences(id, sentences)
}

/// 20-word vocabulary mixing content words, stopwords, punctuation and a number.
pub const ORACLE_VOCAB: [&str; 20] = [
    "heat", "island", "effect", "urban", "data", "mining", "model", "graph", "neural", "network",
    "signal", "phrase", "token", "query", "of", "the", "and", "in", ",", "2020",
];

pub fn mining_oracle_run(n_docs: usize, seed: u64) -> Result<(), String> {
    let stop = Stopwords::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in 0..n_docs {
        let doc = random_document(&mut rng, &format!("d{d}"), &ORACLE_VOCAB, 300);
        let k_max = rng.random_range(2..=6);
        let got: BTreeSet<_> = mine_core_phrases(&doc, 2, k_max)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|l| l.span.key())
            .collect();
        let want = oracle_labels(&doc, stop, 2, k_max);
        if got != want {
            return Err(format!(
                "document {d} (k_max {k_max}) differs: got {} labels, oracle {}",
                got.len(),
                want.len()
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference forward pass: explicit padding to `grid` cells, validity mask
// after every layer, masked mean pooling.

pub fn reference_logit(
    blocks: &Blocks<f64>,
    cin: usize,
    feature: &SpanFeature,
    grid: usize,
) -> f64 {
    let k = feature.size;
    assert!(grid >= k);
    let c = 32;
    let valid = |r: usize, s: usize| r < k && s < k;
    let at = |v: &Vec<Vec<Vec<f64>>>, ch: usize, r: isize, s: isize| -> f64 {
        if r < 0 || s < 0 || r as usize >= grid || s as usize >= grid {
            0.0
        } else {
            v[ch][r as usize][s as usize]
        }
    };
    let mut x = vec![vec![vec![0.0; grid]; grid]; cin];
    for ch in 0..cin {
        for r in 0..k {
            for s in 0..k {
                x[ch][r][s] = f64::from(feature.get(ch, r, s));
            }
        }
    }
    let conv = |input: &Vec<Vec<Vec<f64>>>, n_in: usize, w: &[f64], b: &[f64]| {
        let mut out = vec![vec![vec![0.0; grid]; grid]; c];
        for f in 0..c {
            for r in 0..grid {
                for s in 0..grid {
                    if !valid(r, s) {
                        continue;
                    }
                    let mut acc = b[f];
                    for g in 0..n_in {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let wv = w[((f * n_in + g) * 3 + dy) * 3 + dx];
                                acc += wv
                                    * at(
                                        input,
                                        g,
                                        r as isize + dy as isize - 1,
                                        s as isize + dx as isize - 1,
                                    );
                            }
                        }
                    }
                    out[f][r][s] = acc.max(0.0);
                }
            }
        }
        out
    };
    let a1 = conv(&x, cin, &blocks.conv1_w, &blocks.conv1_b);
    let a2 = conv(&a1, c, &blocks.conv2_w, &blocks.conv2_b);
    let mut logit = blocks.out_b[0];
    for f in 0..c {
        let mut sum = 0.0;
        let mut cells = 0;
        for r in 0..grid {
            for s in 0..grid {
                if valid(r, s) {
                    sum += a2[f][r][s];
                    cells += 1;
                }
            }
        }
        logit += blocks.out_w[f] * sum / cells as f64;
    }
    logit
}

pub fn random_feature(rng: &mut ChaCha8Rng, channels: usize, k: usize) -> SpanFeature {
    SpanFeature {
        span: Span {
            sent_idx: 0,
            start: 0,
            end: k,
            words: (0..k).map(|i| format!("w{i}")).collect(),
        },
        channels,
        size: k,
        values: (0..channels * k * k)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect(),
    }
}

/// Random parameters in f64 with non-zero biases, so every block carries gradient.
pub fn random_blocks(rng: &mut ChaCha8Rng, cin: usize) -> Blocks<f64> {
    let mut b = ModelParams::init(cin, 6, rng.random())
        .blocks
        .map(f64::from);
    for v in b
        .conv1_b
        .iter_mut()
        .chain(&mut b.conv2_b)
        .chain(&mut b.out_b)
    {
        *v = rng.random_range(-0.2..0.2);
    }
    b
}

/// 3x3 convolution with zero border on a `k`x`k` grid, followed by ReLU.
/// Returns `(pre-activation, activation)` for the requested filters.
fn conv_relu(
    x: &[f64],
    n_in: usize,
    k: usize,
    w: &[f64],
    b: &[f64],
    filters: std::ops::Range<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let kk = k * k;
    let mut z = vec![0.0; filters.len() * kk];
    for (fi, f) in filters.enumerate() {
        for r in 0..k {
            for s in 0..k {
                let mut acc = b[f];
                for g in 0..n_in {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (rr, ss) = (r + dy, s + dx);
                            if rr == 0 || ss == 0 || rr > k || ss > k {
                                continue;
                            }
                            acc += w[((f * n_in + g) * 3 + dy) * 3 + dx]
                                * x[g * kk + (rr - 1) * k + ss - 1];
                        }
                    }
                }
                z[fi * kk + r * k + s] = acc;
            }
        }
    }
    let a = z.iter().map(|v| v.max(0.0)).collect();
    (z, a)
}

struct Cached {
    x: Vec<f64>,
    k: usize,
    a1: Vec<f64>,
    z2: Vec<f64>,
    pooled: Vec<f64>,
    label: f64,
}

fn cache(blocks: &Blocks<f64>, cin: usize, ex: &Example) -> (Cached, f64) {
    let k = ex.feature.size;
    let x: Vec<f64> = ex.feature.values.iter().map(|&v| f64::from(v)).collect();
    let (z1, a1) = conv_relu(&x, cin, k, &blocks.conv1_w, &blocks.conv1_b, 0..32);
    let (z2, a2) = conv_relu(&a1, 32, k, &blocks.conv2_w, &blocks.conv2_b, 0..32);
    let pooled = a2
        .chunks(k * k)
        .map(|c| c.iter().sum::<f64>() / (k * k) as f64)
        .collect();
    let kink = z1
        .iter()
        .chain(&z2)
        .fold(f64::INFINITY, |m, z| m.min(z.abs()));
    (
        Cached {
            x,
            k,
            a1,
            z2,
            pooled,
            label: ex.label,
        },
        kink,
    )
}

fn clamped_bce(logit: f64, y: f64) -> f64 {
    let p = (1.0 / (1.0 + (-logit).exp())).clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn head_loss(blocks: &Blocks<f64>, c: &Cached, pooled: &[f64]) -> f64 {
    let logit = blocks.out_b[0]
        + pooled
            .iter()
            .zip(&blocks.out_w)
            .map(|(p, w)| p * w)
            .sum::<f64>();
    clamped_bce(logit, c.label)
}

/// Smallest |pre-activation| over a batch; central differences are only
/// meaningful when no ReLU sits within `eps` of its kink.
pub fn min_preactivation(blocks: &Blocks<f64>, cin: usize, batch: &[Example]) -> f64 {
    batch
        .iter()
        .map(|ex| cache(blocks, cin, ex).1)
        .fold(f64::INFINITY, f64::min)
}

/// Largest per-block relative error `max|a - n| / max(max|a|, max|n|, 1e-8)`
/// between analytic and central-difference gradients of the mean loss.
///
/// The numeric side is computed here from scratch; a perturbation of a
/// conv2 or output parameter only re-evaluates the layers it can reach.
pub fn gradient_check(
    blocks: &Blocks<f64>,
    cin: usize,
    batch: &[Example],
    eps: f64,
) -> Vec<(&'static str, f64)> {
    let (_, analytic) = loss_and_gradients(blocks, cin, batch);
    let n = batch.len() as f64;
    let cached: Vec<Cached> = batch.iter().map(|ex| cache(blocks, cin, ex).0).collect();

    // A conv1 filter change only alters its own activation channel; push the
    // difference through conv2 (linear before the ReLU).
    let conv1_loss = |p: &Blocks<f64>, f: usize| -> f64 {
        cached
            .iter()
            .map(|c| {
                let (k, kk) = (c.k, c.k * c.k);
                let (_, a1f) = conv_relu(&c.x, cin, k, &p.conv1_w, &p.conv1_b, f..f + 1);
                let delta: Vec<f64> = a1f
                    .iter()
                    .zip(&c.a1[f * kk..(f + 1) * kk])
                    .map(|(a, b)| a - b)
                    .collect();
                let mut pooled = vec![0.0; 32];
                for g in 0..32 {
                    let mut sum = 0.0;
                    for r in 0..k {
                        for s in 0..k {
                            let mut z = c.z2[g * kk + r * k + s];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (rr, ss) = (r + dy, s + dx);
                                    if rr == 0 || ss == 0 || rr > k || ss > k {
                                        continue;
                                    }
                                    z += p.conv2_w[((g * 32 + f) * 3 + dy) * 3 + dx]
                                        * delta[(rr - 1) * k + ss - 1];
                                }
                            }
                            sum += z.max(0.0);
                        }
                    }
                    pooled[g] = sum / kk as f64;
                }
                head_loss(p, c, &pooled)
            })
            .sum::<f64>()
            / n
    };
    let conv2_loss = |p: &Blocks<f64>, f: usize| -> f64 {
        cached
            .iter()
            .map(|c| {
                let (_, a2f) = conv_relu(&c.a1, 32, c.k, &p.conv2_w, &p.conv2_b, f..f + 1);
                let mut pooled = c.pooled.clone();
                pooled[f] = a2f.iter().sum::<f64>() / (c.k * c.k) as f64;
                head_loss(p, c, &pooled)
            })
            .sum::<f64>()
            / n
    };
    let head_only = |p: &Blocks<f64>| -> f64 {
        cached
            .iter()
            .map(|c| head_loss(p, c, &c.pooled))
            .sum::<f64>()
            / n
    };

    let mut out = Vec::new();
    for bi in 0..6 {
        let (name, values) = blocks.iter().nth(bi).unwrap();
        let a = analytic.iter().nth(bi).unwrap().1;
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        let mut p = blocks.clone();
        for i in 0..values.len() {
            let mut eval = |delta: f64| {
                p.iter_mut().nth(bi).unwrap().1[i] = values[i] + delta;
                let loss = match bi {
                    0 => conv1_loss(&p, i / (cin * 9)),
                    1 => conv1_loss(&p, i),
                    2 => conv2_loss(&p, i / (32 * 9)),
                    3 => conv2_loss(&p, i),
                    _ => head_only(&p),
                };
                p.iter_mut().nth(bi).unwrap().1[i] = values[i];
                loss
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            max_diff = max_diff.max((a[i] - numeric).abs());
            scale = scale.max(a[i].abs()).max(numeric.abs());
        }
        out.push((name, max_diff / scale));
    }
    out
}

/// A random (params, batch) case with every pre-activation at least `margin` from zero.
pub fn gradient_case(seed: u64, margin: f64) -> (Blocks<f64>, usize, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let cin = rng.random_range(1..=3);
        let blocks = random_blocks(&mut rng, cin);
        let batch: Vec<Example> = (0..3)
            .map(|i| {
                let k = rng.random_range(2..=4);
                Example {
                    feature: random_feature(&mut rng, cin, k),
                    label: (i % 2) as f64,
                }
            })
            .collect();
        if min_preactivation(&blocks, cin, &batch) >= margin {
            return (blocks, cin, batch);
        }
    }
}

// ---------------------------------------------------------------------------
// Random tensors for codec tests

pub fn random_tensor(rng: &mut ChaCha8Rng, key: SentKey) -> AttentionTensor {
    let n = rng.random_range(1..=12);
    let l = rng.random_range(1..=3);
    let h = rng.random_range(1..=4);
    let mut values = Vec::with_capacity(l * h * n * n);
    for _ in 0..l * h * n {
        let row: Vec<f32> = (0..n).map(|_| rng.random_range(0.01f32..1.0)).collect();
        let sum: f32 = row.iter().sum();
        values.extend(row.iter().map(|v| v / sum));
    }
    AttentionTensor::new(key, n, l, h, values).unwrap()
}

// ---------------------------------------------------------------------------
// Synthetic end-to-end harness

pub struct EndToEnd {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_epoch: usize,
}

/// Trains on a 200-document planted corpus and tags a 50-document corpus
/// generated with another seed, scoring exact spans against its gold file.
pub fn synthetic_end_to_end(delta: f64, decode: Decode) -> EndToEnd {
    let make = |seed: u64, n_docs: usize| {
        let cfg = SynthConfig {
            n_docs,
            seed,
            planted: PlantedParams {
                delta,
                ..Default::default()
            },
            ..Default::default()
        };
        let synth = generate_synthetic_corpus(&cfg);
        let docs: Vec<Document> = synth
            .records
            .iter()
            .map(|r| Document::new(r.id.clone(), r.text.clone()))
            .collect();
        let provider = PlantedProvider::from_gold(synth.planted.clone(), &synth.gold);
        (synth, docs, provider)
    };
    let (_, train_docs, train_provider) = make(1, 200);
    let (test_synth, test_docs, test_provider) = make(2, 50);

    let mut labels = Vec::new();
    for d in &train_docs {
        let pos = mine_core_phrases(d, 2, 6).unwrap();
        labels.extend(sample_negatives(d, &pos, 6, doc_seed(0, &d.id)));
        labels.extend(pos);
    }
    let config = TrainConfig::default();
    let outcome = train(&train_docs, &labels, &train_provider, &config).unwrap();
    let tagger = Tagger::new(
        &outcome.checkpoint.params,
        &test_provider,
        config.decision_threshold,
        decode,
    )
    .unwrap();
    let preds = tagger.tag_corpus(&test_docs).unwrap().predictions;

    let pred: BTreeSet<_> = preds
        .iter()
        .map(|p| (p.doc_id.clone(), p.span.key()))
        .collect();
    let gold: BTreeSet<_> = test_synth
        .gold
        .iter()
        .flat_map(|g| {
            g.spans
                .iter()
                .map(move |s| (g.id.clone(), (g.sent_idx, s[0], s[1])))
        })
        .collect();
    let tp = pred.intersection(&gold).count() as f64;
    let precision = if pred.is_empty() {
        0.0
    } else {
        tp / pred.len() as f64
    };
    let recall = tp / gold.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EndToEnd {
        precision,
        recall,
        f1,
        best_epoch: outcome.checkpoint.meta.best_epoch,
    }
}

// ---------------------------------------------------------------------------
// Codec harnesses

use phrasetag_core::attnfeat::{write_archive_to, Archive};
use phrasetag_core::classifier::{read_checkpoint, write_checkpoint, Checkpoint};
use phrasetag_core::Error;
use std::io::{Cursor, Read, Seek, SeekFrom};

pub fn random_archive(rng: &mut ChaCha8Rng, n: usize) -> (Vec<AttentionTensor>, Vec<u8>) {
    let tensors: Vec<AttentionTensor> = (0..n)
        .map(|i| {
            let doc = format!("doc-{}", rng.random_range(0..1000));
            random_tensor(rng, SentKey::new(doc, i))
        })
        .collect();
    let mut bytes = Vec::new();
    write_archive_to(&mut bytes, &tensors).unwrap();
    (tensors, bytes)
}

fn same_tensor(a: &AttentionTensor, b: &AttentionTensor) -> bool {
    a.key == b.key
        && (a.n_words, a.n_layers, a.n_heads) == (b.n_words, b.n_layers, b.n_heads)
        && a.values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits())
        && a.values.len() == b.values.len()
}

/// Number of `trials` random archives that read back bit-exactly.
pub fn archive_roundtrips(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let n = rng.random_range(1..=6);
            let (tensors, bytes) = random_archive(&mut rng, n);
            let archive = Archive::from_reader(Cursor::new(bytes)).unwrap();
            tensors
                .iter()
                .all(|t| archive.read(&t.key).is_ok_and(|r| same_tensor(t, &r)))
        })
        .count()
}

/// Flips one byte inside a checksummed payload region (CRC field or values)
/// per trial; returns how many reads reported a checksum mismatch.
pub fn archive_fuzz(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let (tensors, mut bytes) = random_archive(&mut rng, 3);
            let archive = Archive::from_reader(Cursor::new(bytes.clone())).unwrap();
            let entry = archive.entries()[rng.random_range(0..tensors.len())].clone();
            let pos = entry.offset as usize + 4 + rng.random_range(0..entry.length as usize - 4);
            bytes[pos] ^= rng.random_range(1..=255u8);
            let corrupted = Archive::from_reader(Cursor::new(bytes)).unwrap();
            let key = SentKey::decode(&entry.key).unwrap();
            matches!(corrupted.read(&key), Err(Error::ChecksumMismatch { .. }))
        })
        .count()
}

pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let cin = rng.random_range(1..=36);
    let params = ModelParams::init(cin, rng.random_range(2..=8), rng.random());
    let mut ckpt = Checkpoint::new(
        params,
        TrainConfig {
            seed: rng.random(),
            ..TrainConfig::default()
        },
    );
    ckpt.meta.best_epoch = rng.random_range(1..50);
    ckpt.meta.val_f1 = rng.random();
    ckpt
}

pub fn checkpoint_roundtrips(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let ckpt = random_checkpoint(&mut rng);
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &ckpt).unwrap();
            read_checkpoint(&bytes).is_ok_and(|back| {
                back.meta == ckpt.meta
                    && back
                        .params
                        .blocks
                        .iter()
                        .zip(ckpt.params.blocks.iter())
                        .all(|((_, a), (_, b))| {
                            a.len() == b.len()
                                && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                        })
            })
        })
        .count()
}

/// Flips one byte after the fixed header (metadata CRC, metadata, or any
/// parameter block); returns how many loads reported a checksum mismatch.
pub fn checkpoint_fuzz(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let ckpt = random_checkpoint(&mut rng);
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &ckpt).unwrap();
            let pos = rng.random_range(12..bytes.len());
            bytes[pos] ^= rng.random_range(1..=255u8);
            matches!(read_checkpoint(&bytes), Err(Error::ChecksumMismatch { .. }))
        })
        .count()
}

/// Reader that counts bytes delivered.
pub struct CountingReader<R> {
    pub inner: R,
    pub bytes_read: std::sync::Arc<std::sync::atomic::AtomicU64>,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.bytes_read
            .fetch_add(n as u64, std::sync::atomic::Ordering::Relaxed);
        Ok(n)
    }
}

impl<R: Seek> Seek for CountingReader<R> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

/// Fraction of a 1,000-tensor archive read to open it and fetch one key.
pub fn random_access_fraction(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors: Vec<AttentionTensor> = (0..1000)
        .map(|i| random_tensor(&mut rng, SentKey::new("doc", i)))
        .collect();
    let mut bytes = Vec::new();
    write_archive_to(&mut bytes, &tensors).unwrap();
    let total = bytes.len() as f64;
    let counter = std::sync::Arc::new(std::sync::atomic::AtomicU64::new(0));
    let archive = Archive::from_reader(CountingReader {
        inner: Cursor::new(bytes),
        bytes_read: counter.clone(),
    })
    .unwrap();
    let target = &tensors[rng.random_range(0..1000)];
    assert!(same_tensor(target, &archive.read(&target.key).unwrap()));
    counter.load(std::sync::atomic::Ordering::Relaxed) as f64 / total
}

// ---------------------------------------------------------------------------
// Checks shared with the acceptance runner

use phrasetag_core::labelgen::{core_patterns, MiningOptions};

fn is_sub(big: &[String], small: &[String]) -> bool {
    big.len() > small.len() && big.windows(small.len()).any(|w| w == small)
}

/// Maximality and threshold soundness of the mined patterns; `None` when both hold.
pub fn maximality_violation(doc: &Document, k_max: usize, min_freq: usize) -> Option<String> {
    let opts = MiningOptions {
        min_freq,
        k_max,
        stopwords: Stopwords::bundled(),
    };
    let patterns = core_patterns(doc, &opts).unwrap();
    let words: Vec<String> = doc.words().iter().map(|w| w.to_string()).collect();
    let count = |p: &[String]| words.windows(p.len()).filter(|w| *w == p).count();
    for p in &patterns {
        if count(&p.words) < min_freq || p.positions.len() != count(&p.words) {
            return Some(format!("{:?} below threshold or miscounted", p.words));
        }
        if let Some(q) = patterns.iter().find(|q| is_sub(&q.words, &p.words)) {
            return Some(format!("{:?} inside {:?}", p.words, q.words));
        }
    }
    if words.len() >= 4 {
        for n in 2..=k_max.min(words.len()) {
            for w in words.windows(n) {
                let refs: Vec<&str> = w.iter().map(String::as_str).collect();
                if !opts.is_informative(&refs) || patterns.iter().any(|r| r.words == w) {
                    continue;
                }
                if count(w) >= min_freq && !patterns.iter().any(|r| is_sub(&r.words, w)) {
                    return Some(format!("{w:?} dropped"));
                }
            }
        }
    }
    None
}

/// Up to five sentences over [`SMALL_VOCAB`], with k_max and min_freq.
pub fn small_doc_strategy(
) -> impl proptest::strategy::Strategy<Value = (Vec<Vec<usize>>, usize, usize)> {
    use proptest::prelude::*;
    (
        prop::collection::vec(prop::collection::vec(0usize..8, 1..20), 1..5),
        2usize..=6,
        2usize..=3,
    )
}

pub const SMALL_VOCAB: [&str; 8] = ["a", "b", "c", "d", "of", "the", ",", "7"];

pub fn small_vocab_doc(sentences: &[Vec<usize>]) -> Document {
    Document::from_sentences(
        "d",
        sentences
            .iter()
            .map(|s| s.iter().map(|&i| SMALL_VOCAB[i].to_string()).collect())
            .collect(),
    )
}

/// Holds attention fixed, renames every token, and compares logits bit for bit.
/// Returns the number of spans compared.
pub fn surface_agnostic_spans() -> Result<usize, String> {
    use phrasetag_core::attnfeat::{compute_attention, MemoryProvider, SyntheticHashProvider};
    let original = Document::new(
        "d",
        "Quality phrase tagging needs context. Attention maps carry it well.",
    );
    let renamed = Document::new("d", "Zq xv wk pp rr. Mm nn oo ll kk.");
    let lens = |d: &Document| d.sentences.iter().map(|s| s.len()).collect::<Vec<_>>();
    if lens(&original) != lens(&renamed) {
        return Err("sentence shapes differ".into());
    }
    // Attention is computed once, from the original text.
    let source = SyntheticHashProvider::new(4, 2, 3);
    let mut fixed = MemoryProvider::new(2, 3);
    for (i, s) in original.sentences.iter().enumerate() {
        fixed
            .insert(compute_attention(&source, &SentKey::new("d", i), s).unwrap())
            .unwrap();
    }
    let params = ModelParams::init(6, 6, 5);
    let tagger = Tagger::new(&params, &fixed, 0.0, Decode::Overlap).unwrap();
    let a = tagger.tag_document(&original).unwrap().predictions;
    let b = tagger.tag_document(&renamed).unwrap().predictions;
    if a.len() != b.len() || a.is_empty() {
        return Err(format!("{} vs {} spans", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(&b) {
        if x.logit.to_bits() != y.logit.to_bits() || x.span.words == y.span.words {
            return Err(format!(
                "span {:?}: {} vs {}",
                x.span.key(),
                x.logit,
                y.logit
            ));
        }
    }
    Ok(a.len())
}

/// Scripted validation F1 0.60, 0.72, 0.70: returns (epochs run, best epoch,
/// reported validation F1, whether the returned params equal the epoch-2 snapshot).
pub fn scripted_early_stopping() -> (usize, usize, f64, bool) {
    use phrasetag_core::classifier::{train_with_validator, ValidationMetrics};
    use std::cell::RefCell;
    let trajectory = [0.60, 0.72, 0.70, 0.95];
    let seen = RefCell::new(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let examples: Vec<Example> = (0..12)
        .map(|i| {
            let k = rng.random_range(2..=4);
            Example {
                feature: random_feature(&mut rng, 2, k),
                label: (i % 2) as f64,
            }
        })
        .collect();
    let config = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train_with_validator(
        &examples,
        ModelParams::init(2, 6, 1),
        &config,
        |epoch, params| {
            seen.borrow_mut().push(params.clone());
            let f1 = trajectory[epoch - 1];
            Ok(ValidationMetrics {
                precision: f1,
                recall: f1,
                f1,
            })
        },
    )
    .unwrap();
    let same = seen.borrow().get(1) == Some(&outcome.checkpoint.params);
    (
        outcome.epochs.len(),
        outcome.checkpoint.meta.best_epoch,
        outcome.checkpoint.meta.val_f1,
        same,
    )
}
