//! Phrase ranking, keyphrase extraction and span tagging metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_phrase, Document, GoldKeyphraseRecord, GoldTaggingRecord};
use crate::error::{Error, Result};
use crate::tagger::Prediction;

/// Number of phrases drawn for human annotation.
pub const ANNOTATION_SAMPLE_SIZE: usize = 200;
/// Cutoff for keyphrase F1.
pub const TOP_K_KEYPHRASES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ranking,
    Keyphrase,
    Tagging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub n_items: BTreeMap<String, usize>,
    /// Conditions worth surfacing, such as an empty prediction set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    fn new(task: Task) -> Self {
        EvalReport {
            task,
            metrics: BTreeMap::new(),
            n_items: BTreeMap::new(),
            flags: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

// ---------------------------------------------------------------------------
// Corpus-level ranking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPhrase {
    pub phrase: String,
    pub score: f64,
    pub count: usize,
}

/// Groups predictions by surface form and orders them by mean logit.
pub fn rank_phrases_global(predictions: &[Prediction]) -> Vec<RankedPhrase> {
    let mut sums: HashMap<String, (f64, usize)> = HashMap::new();
    for p in predictions {
        let entry = sums
            .entry(p.span.words.join(" ").to_lowercase())
            .or_insert((0.0, 0));
        entry.0 += p.logit;
        entry.1 += 1;
    }
    let mut ranked: Vec<RankedPhrase> = sums
        .into_iter()
        .map(|(phrase, (sum, count))| RankedPhrase {
            phrase,
            score: sum / count as f64,
            count,
        })
        .collect();
    ranked.sort_by(compare_ranked);
    ranked
}

fn compare_ranked(a: &RankedPhrase, b: &RankedPhrase) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.count.cmp(&a.count))
        .then_with(|| a.phrase.cmp(&b.phrase))
}

/// Seeded uniform sample from the top `top_k` phrases, returned in rank order.
pub fn sample_for_annotation(
    ranked: &[RankedPhrase],
    top_k: usize,
    size: usize,
    seed: u64,
) -> Vec<String> {
    let pool = top_k.min(ranked.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool, size.min(pool)).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| ranked[i].phrase.clone())
        .collect()
}

/// Renders phrases as annotation lines awaiting a `0`/`1` judgement.
pub fn annotation_template(phrases: &[String]) -> String {
    phrases.iter().map(|p| format!("{p}\t\n")).collect()
}

/// Parses `phrase<TAB>0|1` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_annotations(text: &str) -> Result<BTreeMap<String, bool>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedLine {
            path: "<annotations>".into(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let (phrase, judgement) = line
            .rsplit_once('\t')
            .ok_or_else(|| malformed("expected phrase<TAB>0|1"))?;
        let good = match judgement.trim() {
            "1" => true,
            "0" => false,
            _ => return Err(malformed("judgement must be 0 or 1")),
        };
        out.insert(phrase.trim().to_lowercase(), good);
    }
    Ok(out)
}

/// Precision of the judged phrases among the top `top_k`. Phrases without a
/// judgement are counted but never guessed.
pub fn precision_at_k(
    ranked: &[RankedPhrase],
    top_k: usize,
    annotations: &BTreeMap<String, bool>,
) -> EvalReport {
    let top = &ranked[..top_k.min(ranked.len())];
    let judged: Vec<bool> = top
        .iter()
        .filter_map(|r| annotations.get(&r.phrase).copied())
        .collect();
    let good = judged.iter().filter(|&&g| g).count();
    let mut report = EvalReport::new(Task::Ranking);
    let precision = if judged.is_empty() {
        report.flags.push("no_judged_phrases".into());
        0.0
    } else {
        good as f64 / judged.len() as f64
    };
    report.metrics.insert("precision".into(), precision);
    report.n_items.insert("top_k".into(), top_k);
    report.n_items.insert("ranked".into(), top.len());
    report.n_items.insert("judged".into(), judged.len());
    report.n_items.insert("judged_good".into(), good);
    report
}

// ---------------------------------------------------------------------------
// Keyphrase extraction

/// A candidate phrase within one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub phrase: String,
    pub tf: usize,
    /// Document-level word position of the first occurrence.
    pub first_pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocCandidates {
    pub doc_id: String,
    pub candidates: Vec<Candidate>,
}

/// Collects predicted phrases per document. Every corpus document gets an
/// entry, possibly empty; candidates are listed by first occurrence.
pub fn candidates_from_predictions(
    docs: &[Document],
    predictions: &[Prediction],
) -> Vec<DocCandidates> {
    let mut per_doc: HashMap<&str, HashMap<String, Candidate>> = HashMap::new();
    let offsets: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    for p in predictions {
        let Some(doc) = offsets.get(p.doc_id.as_str()) else {
            continue;
        };
        let pos = doc.sentences[p.span.sent_idx].doc_offset + p.span.start;
        let phrase = p.span.words.join(" ").to_lowercase();
        let entry = per_doc
            .entry(doc.id.as_str())
            .or_default()
            .entry(phrase.clone())
            .or_insert(Candidate {
                phrase,
                tf: 0,
                first_pos: pos,
            });
        entry.tf += 1;
        entry.first_pos = entry.first_pos.min(pos);
    }
    docs.iter()
        .map(|d| {
            let mut candidates: Vec<Candidate> = per_doc
                .remove(d.id.as_str())
                .unwrap_or_default()
                .into_values()
                .collect();
            candidates.sort_by(|a, b| {
                a.first_pos
                    .cmp(&b.first_pos)
                    .then_with(|| a.phrase.cmp(&b.phrase))
            });
            DocCandidates {
                doc_id: d.id.clone(),
                candidates,
            }
        })
        .collect()
}

/// Document frequencies over candidate surface forms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub df: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_candidates(docs: &[DocCandidates]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let unique: HashSet<&str> = d.candidates.iter().map(|c| c.phrase.as_str()).collect();
            for p in unique {
                *df.entry(p.to_string()).or_default() += 1;
            }
        }
        CorpusStats {
            n_docs: docs.len(),
            df,
        }
    }

    /// `ln((1 + M) / (1 + df)) + 1`.
    pub fn idf(&self, phrase: &str) -> f64 {
        let df = self.df.get(phrase).copied().unwrap_or(0);
        ((1.0 + self.n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

/// Ranks a document's candidates by `tf * idf`; ties go to the earlier first occurrence.
pub fn tfidf_rank_document(doc: &DocCandidates, stats: &CorpusStats) -> Vec<(String, f64)> {
    let mut scored: Vec<(&Candidate, f64)> = doc
        .candidates
        .iter()
        .map(|c| (c, c.tf as f64 * stats.idf(&c.phrase)))
        .collect();
    scored.sort_by(|(a, sa), (b, sb)| {
        sb.total_cmp(sa)
            .then(a.first_pos.cmp(&b.first_pos))
            .then_with(|| a.phrase.cmp(&b.phrase))
    });
    scored
        .into_iter()
        .map(|(c, s)| (c.phrase.clone(), s))
        .collect()
}

/// Extraction output for one document: the candidate list and its ranked head.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyphraseDoc {
    pub doc_id: String,
    pub candidates: Vec<String>,
    pub top: Vec<String>,
}

/// Builds [`KeyphraseDoc`]s by TF-IDF ranking. With `max_candidates`, only
/// that many top-ranked candidates are kept per document.
pub fn keyphrase_docs(docs: &[DocCandidates], max_candidates: Option<usize>) -> Vec<KeyphraseDoc> {
    let stats = CorpusStats::from_candidates(docs);
    docs.iter()
        .map(|d| {
            let mut ranked: Vec<String> = tfidf_rank_document(d, &stats)
                .into_iter()
                .map(|(p, _)| p)
                .collect();
            if let Some(max) = max_candidates {
                ranked.truncate(max);
            }
            KeyphraseDoc {
                doc_id: d.doc_id.clone(),
                top: ranked.iter().take(TOP_K_KEYPHRASES).cloned().collect(),
                candidates: ranked,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyphraseOptions {
    /// Compare Porter-stemmed forms instead of normalized strings.
    pub stem: bool,
}

fn match_form(phrase: &str, stemmer: Option<&rust_stemmers::Stemmer>) -> String {
    let normalized = normalize_phrase(phrase);
    match stemmer {
        None => normalized,
        Some(s) => normalized
            .split(' ')
            .map(|w| s.stem(w))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// Macro candidate recall and F1@10 over documents with non-empty gold.
pub fn evaluate_keyphrase(
    extracted: &[KeyphraseDoc],
    gold: &[GoldKeyphraseRecord],
    options: KeyphraseOptions,
) -> Result<EvalReport> {
    let pred_ids: BTreeSet<&str> = extracted.iter().map(|d| d.doc_id.as_str()).collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    if pred_ids != gold_ids {
        let diff = pred_ids
            .symmetric_difference(&gold_ids)
            .map(|s| s.to_string())
            .collect();
        return Err(Error::DocIdMismatch(diff));
    }
    let stemmer = options
        .stem
        .then(|| rust_stemmers::Stemmer::create(rust_stemmers::Algorithm::English));
    let stemmer = stemmer.as_ref();
    let by_id: HashMap<&str, &KeyphraseDoc> =
        extracted.iter().map(|d| (d.doc_id.as_str(), d)).collect();

    let (mut recall_sum, mut f1_sum, mut p_sum, mut r_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut evaluated, mut skipped) = (0usize, 0usize);
    for g in gold {
        let gold_set: HashSet<String> = g
            .keyphrases
            .iter()
            .map(|k| match_form(k, stemmer))
            .filter(|k| !k.is_empty())
            .collect();
        if gold_set.is_empty() {
            skipped += 1;
            continue;
        }
        let doc = by_id[g.id.as_str()];
        let candidates: HashSet<String> = doc
            .candidates
            .iter()
            .map(|c| match_form(c, stemmer))
            .collect();
        let top: HashSet<String> = doc
            .top
            .iter()
            .take(TOP_K_KEYPHRASES)
            .map(|c| match_form(c, stemmer))
            .collect();
        let hits = top.intersection(&gold_set).count() as f64;
        let p = hits / TOP_K_KEYPHRASES as f64;
        let r = hits / gold_set.len() as f64;
        recall_sum += candidates.intersection(&gold_set).count() as f64 / gold_set.len() as f64;
        p_sum += p;
        r_sum += r;
        f1_sum += f1(p, r);
        evaluated += 1;
    }

    let mut report = EvalReport::new(Task::Keyphrase);
    let mean = |s: f64| {
        if evaluated == 0 {
            0.0
        } else {
            s / evaluated as f64
        }
    };
    if evaluated == 0 {
        report.flags.push("no_gold_keyphrases".into());
    }
    report.metrics.insert("recall".into(), mean(recall_sum));
    report.metrics.insert("f1_at_10".into(), mean(f1_sum));
    report.metrics.insert("precision_at_10".into(), mean(p_sum));
    report.metrics.insert("recall_at_10".into(), mean(r_sum));
    report.n_items.insert("documents".into(), evaluated);
    report.n_items.insert("skipped_empty_gold".into(), skipped);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Span tagging

/// `(doc_id, sent_idx, start, end)`.
pub type SpanKey = (String, usize, usize, usize);

pub fn prediction_keys(predictions: &[Prediction]) -> Vec<SpanKey> {
    predictions
        .iter()
        .map(|p| (p.doc_id.clone(), p.span.sent_idx, p.span.start, p.span.end))
        .collect()
}

pub fn gold_keys(gold: &[GoldTaggingRecord]) -> Vec<SpanKey> {
    gold.iter()
        .flat_map(|g| {
            g.spans
                .iter()
                .map(move |s| (g.id.clone(), g.sent_idx, s[0], s[1]))
        })
        .collect()
}

/// Raw counts behind the micro metrics; additive across disjoint sentence sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaggingCounts {
    pub predicted: usize,
    pub gold: usize,
    pub matched: usize,
}

impl TaggingCounts {
    pub fn of(predicted: &[SpanKey], gold: &[SpanKey]) -> Self {
        let pred: HashSet<&SpanKey> = predicted.iter().collect();
        let gold: HashSet<&SpanKey> = gold.iter().collect();
        TaggingCounts {
            predicted: pred.len(),
            gold: gold.len(),
            matched: pred.intersection(&gold).count(),
        }
    }

    pub fn report(self) -> EvalReport {
        let mut report = EvalReport::new(Task::Tagging);
        let p = if self.predicted == 0 {
            report.flags.push("empty_predictions".into());
            0.0
        } else {
            self.matched as f64 / self.predicted as f64
        };
        let r = if self.gold == 0 {
            report.flags.push("empty_gold".into());
            0.0
        } else {
            self.matched as f64 / self.gold as f64
        };
        report.metrics.insert("precision".into(), p);
        report.metrics.insert("recall".into(), r);
        report.metrics.insert("f1".into(), f1(p, r));
        report.n_items.insert("predicted".into(), self.predicted);
        report.n_items.insert("gold".into(), self.gold);
        report.n_items.insert("matched".into(), self.matched);
        report
    }
}

impl std::ops::Add for TaggingCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        TaggingCounts {
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
            matched: self.matched + o.matched,
        }
    }
}

/// Exact-match micro precision, recall and F1. Duplicate keys count once.
pub fn evaluate_tagging(predicted: &[SpanKey], gold: &[SpanKey]) -> EvalReport {
    TaggingCounts::of(predicted, gold).report()
}
