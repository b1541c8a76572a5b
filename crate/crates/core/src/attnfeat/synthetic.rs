//! Deterministic attention providers and the synthetic corpus generator.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_rows, AttentionProvider, AttentionTensor, SentKey};
use crate::corpus::{CorpusRecord, GoldTaggingRecord, Stopwords};
use crate::error::Result;
use crate::hash::{combine, hash_str, unit_signed};

/// Softmax over seeded hashes of `(token, position)` pairs; surface dependent by design.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHashProvider {
    pub seed: u64,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl SyntheticHashProvider {
    pub fn new(seed: u64, n_layers: usize, n_heads: usize) -> Self {
        SyntheticHashProvider {
            seed,
            n_layers,
            n_heads,
        }
    }
}

impl AttentionProvider for SyntheticHashProvider {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn attention(&self, key: &SentKey, words: &[String]) -> Result<AttentionTensor> {
        let n = words.len();
        let hashes: Vec<u64> = words.iter().map(|w| hash_str(w)).collect();
        let mut values = Vec::with_capacity(self.channels() * n * n);
        let mut logits = vec![0.0; n * n];
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for i in 0..n {
                    for j in 0..n {
                        let z = combine(&[
                            self.seed, hashes[i], i as u64, l as u64, h as u64, hashes[j], j as u64,
                        ]);
                        logits[i * n + j] = 2.0 * unit_signed(z);
                    }
                }
                softmax_rows(&logits, n, &mut values);
            }
        }
        AttentionTensor::new(key.clone(), n, self.n_layers, self.n_heads, values)
    }
}

/// Parameters of the planted-attention provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    pub seed: u64,
    /// Logit boost between two words of the same planted span.
    pub delta: f64,
    /// Amplitude of the seeded uniform logit noise.
    pub noise: f64,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            seed: 0,
            delta: 4.0,
            noise: 1.0,
            n_layers: super::DEFAULT_LAYERS,
            n_heads: super::DEFAULT_HEADS,
        }
    }
}

/// Noise attention plus a `delta` logit boost inside every planted span.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedProvider {
    params: PlantedParams,
    spans: HashMap<SentKey, Vec<(usize, usize)>>,
}

impl PlantedProvider {
    pub fn new(params: PlantedParams, spans: HashMap<SentKey, Vec<(usize, usize)>>) -> Self {
        PlantedProvider { params, spans }
    }

    pub fn from_gold(params: PlantedParams, gold: &[GoldTaggingRecord]) -> Self {
        PlantedProvider::new(params, planted_spans(gold))
    }

    pub fn params(&self) -> &PlantedParams {
        &self.params
    }
}

/// Groups gold spans by sentence.
pub fn planted_spans(gold: &[GoldTaggingRecord]) -> HashMap<SentKey, Vec<(usize, usize)>> {
    let mut spans: HashMap<SentKey, Vec<(usize, usize)>> = HashMap::new();
    for r in gold {
        spans
            .entry(SentKey::new(r.id.clone(), r.sent_idx))
            .or_default()
            .extend(r.spans.iter().map(|s| (s[0], s[1])));
    }
    spans
}

impl AttentionProvider for PlantedProvider {
    fn n_layers(&self) -> usize {
        self.params.n_layers
    }

    fn n_heads(&self) -> usize {
        self.params.n_heads
    }

    fn attention(&self, key: &SentKey, words: &[String]) -> Result<AttentionTensor> {
        let n = words.len();
        // block[i] = id of the planted span containing word i
        let mut block = vec![usize::MAX; n];
        for (id, &(start, end)) in self.spans.get(key).into_iter().flatten().enumerate() {
            for b in block.iter_mut().take(end.min(n)).skip(start) {
                *b = id;
            }
        }
        let hashes: Vec<u64> = words.iter().map(|w| hash_str(w)).collect();
        let p = &self.params;
        let mut values = Vec::with_capacity(self.channels() * n * n);
        let mut logits = vec![0.0; n * n];
        for l in 0..p.n_layers {
            for h in 0..p.n_heads {
                for i in 0..n {
                    for j in 0..n {
                        let z =
                            combine(&[p.seed, hashes[i], i as u64, l as u64, h as u64, j as u64]);
                        let boost = if block[i] != usize::MAX && block[i] == block[j] {
                            p.delta
                        } else {
                            0.0
                        };
                        logits[i * n + j] = p.noise * unit_signed(z) + boost;
                    }
                }
                softmax_rows(&logits, n, &mut values);
            }
        }
        AttentionTensor::new(key.clone(), n, p.n_layers, p.n_heads, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub vocab_size: usize,
    pub phrase_bank_size: usize,
    pub seed: u64,
    pub planted: PlantedParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 200,
            vocab_size: 2000,
            phrase_bank_size: 40,
            seed: 0,
            planted: PlantedParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<CorpusRecord>,
    /// One record per sentence, listing its injected phrase spans.
    pub gold: Vec<GoldTaggingRecord>,
    pub planted: PlantedParams,
    pub phrase_bank: Vec<Vec<String>>,
}

const FILLER_CONSONANTS: &[u8] = b"bdgklmnprst";
const PHRASE_CONSONANTS: &[u8] = b"fhjvz";
const VOWELS: &[u8] = b"aeiou";

/// Pseudo-word number `i` over the given consonant alphabet, at least two syllables long.
fn pseudo_word(mut i: usize, consonants: &[u8]) -> String {
    let base = consonants.len() * VOWELS.len();
    let mut out = String::new();
    let mut syllables = 0;
    while syllables < 2 || i > 0 {
        let s = i % base;
        i /= base;
        out.push(consonants[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        syllables += 1;
    }
    out
}

fn word_list(count: usize, consonants: &[u8]) -> Vec<String> {
    let stop = Stopwords::bundled();
    (0..)
        .map(|i| pseudo_word(i, consonants))
        .filter(|w| !stop.contains(w))
        .take(count)
        .collect()
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Random filler sentences with phrases from a bank injected at least twice
/// per document that uses them. Filler and phrase words come from disjoint
/// alphabets and every bank word belongs to exactly one phrase.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = word_list(config.vocab_size.max(1), FILLER_CONSONANTS);

    let bank_size = config.phrase_bank_size.max(1);
    let lengths: Vec<usize> = (0..bank_size).map(|_| rng.random_range(2..=4)).collect();
    let mut phrase_words = word_list(lengths.iter().sum(), PHRASE_CONSONANTS).into_iter();
    let phrase_bank: Vec<Vec<String>> = lengths
        .iter()
        .map(|&len| phrase_words.by_ref().take(len).collect())
        .collect();

    let mut records = Vec::with_capacity(config.n_docs);
    let mut gold = Vec::new();
    for d in 0..config.n_docs {
        let id = format!("synth-{d:05}");
        let n_phrases = rng.random_range(2..=4).min(bank_size);
        let chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, bank_size, n_phrases).into_vec();
        let n_sentences = rng.random_range(4..=7);

        let mut per_sentence: Vec<Vec<usize>> = vec![Vec::new(); n_sentences];
        for &p in &chosen {
            for _ in 0..rng.random_range(2..=3) {
                per_sentence[rng.random_range(0..n_sentences)].push(p);
            }
        }

        let mut sentence_texts = Vec::with_capacity(n_sentences);
        for (s, phrases) in per_sentence.iter_mut().enumerate() {
            phrases.shuffle(&mut rng);
            let n_filler = rng.random_range(6..=12usize).max(phrases.len());
            let mut slots =
                rand::seq::index::sample(&mut rng, n_filler + 1, phrases.len()).into_vec();
            slots.sort_unstable();

            let mut tokens: Vec<String> = Vec::new();
            let mut spans = Vec::new();
            let mut next_phrase = 0;
            for slot in 0..=n_filler {
                if next_phrase < phrases.len() && slots[next_phrase] == slot {
                    let words = &phrase_bank[phrases[next_phrase]];
                    spans.push([tokens.len(), tokens.len() + words.len()]);
                    tokens.extend(words.iter().cloned());
                    next_phrase += 1;
                }
                if slot < n_filler {
                    tokens.push(vocab.choose(&mut rng).expect("vocab is non-empty").clone());
                }
            }
            gold.push(GoldTaggingRecord {
                id: id.clone(),
                sent_idx: s,
                spans,
            });
            let mut text = capitalize(&tokens[0]);
            for t in &tokens[1..] {
                text.push(' ');
                text.push_str(t);
            }
            text.push('.');
            sentence_texts.push(text);
        }
        records.push(CorpusRecord {
            id,
            text: sentence_texts.join(" "),
        });
    }

    SyntheticCorpus {
        records,
        gold,
        planted: PlantedParams {
            seed: config.seed,
            ..config.planted.clone()
        },
        phrase_bank,
    }
}
