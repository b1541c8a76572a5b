//! The `phrasetag` command-line driver.
//!
//! Configuration is resolved in three layers: built-in defaults, an optional
//! TOML file of flat dotted keys (`mining.k_max = 5`), then `--set key=value`
//! pairs and subcommand flags. Every report embeds the resolved configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attnfeat::{
    compute_attention, generate_synthetic_corpus, planted_spans, write_archive, AttentionProvider,
    AttentionTensor, PlantedParams, ProviderSpec, SentKey, SynthConfig,
};
use crate::classifier::{load_checkpoint, save_checkpoint, train, TrainConfig};
use crate::corpus::{
    load_corpus, write_corpus, CorpusFormat, Document, GoldKeyphraseRecord, GoldTaggingRecord,
    Stopwords,
};
use crate::error::{Error, Result};
use crate::eval::{
    annotation_template, candidates_from_predictions, evaluate_keyphrase, evaluate_tagging,
    gold_keys, keyphrase_docs, parse_annotations, precision_at_k, rank_phrases_global,
    sample_for_annotation, KeyphraseOptions, RankedPhrase, SpanKey,
};
use crate::hash::doc_seed;
use crate::jsonl;
use crate::labelgen::{
    gazetteer_match, merge_labels, mine_core_phrases_with, read_labels, sample_negatives,
    write_labels, Gazetteer, MiningOptions, Polarity, SpanLabel,
};
use crate::tagger::{read_predictions, write_predictions, Decode, PredictionRecord, Tagger};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Archive,
    SyntheticHash,
    SyntheticPlanted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub planted: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub ranked: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub min_freq: usize,
    pub k_max: usize,
    /// Emit sampled negatives next to the positives.
    pub negatives: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            min_freq: 2,
            k_max: 6,
            negatives: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// Unset means `archive` when an archive path is given.
    pub kind: Option<ProviderKind>,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: None,
            layers: crate::attnfeat::DEFAULT_LAYERS,
            heads: crate::attnfeat::DEFAULT_HEADS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub n_docs: usize,
    pub vocab_size: usize,
    pub phrase_bank_size: usize,
    pub delta: f64,
    pub noise: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSettings {
            n_docs: d.n_docs,
            vocab_size: d.vocab_size,
            phrase_bank_size: d.phrase_bank_size,
            delta: d.planted.delta,
            noise: d.planted.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            validation_fraction: d.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagSettings {
    pub threshold: f64,
    pub decode: Decode,
}

impl Default for TagSettings {
    fn default() -> Self {
        TagSettings {
            threshold: 0.5,
            decode: Decode::Overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Candidates kept per document for keyphrase recall; unset keeps all.
    pub max_candidates: Option<usize>,
    pub stem: bool,
    /// Ranking slice used for sampling and precision.
    pub top_k: usize,
    pub sample_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            max_candidates: None,
            stem: false,
            top_k: 5000,
            sample_size: crate::eval::ANNOTATION_SAMPLE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub mining: MiningConfig,
    pub provider: ProviderConfig,
    pub synth: SynthSettings,
    pub train: TrainSettings,
    pub tag: TagSettings,
    pub eval: EvalSettings,
}

impl PipelineConfig {
    /// Loads defaults overlaid with a TOML file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("{}: {}", path.display(), e.message()))
        })?;
        let mut pairs = Vec::new();
        flatten_toml("", &toml::Value::Table(table), &mut pairs);
        PipelineConfig::default().with_overrides(&pairs)
    }

    /// Applies dotted-key overrides; unknown keys are rejected.
    pub fn with_overrides(&self, pairs: &[(String, Value)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, value) in pairs {
            let slot = key
                .split('.')
                .try_fold(&mut tree, |node, part| node.as_object_mut()?.get_mut(part))
                .filter(|slot| !slot.is_object())
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            *slot = value.clone();
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.mining.k_max < 2 {
            return Err(Error::Config(format!(
                "mining.k_max must be at least 2, got {}",
                self.mining.k_max
            )));
        }
        if self.mining.min_freq < 2 {
            return Err(Error::Config(format!(
                "mining.min_freq must be at least 2, got {}",
                self.mining.min_freq
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.tag.threshold >= 0.0) {
            return Err(Error::Config(format!(
                "tag.threshold must not be negative, got {}",
                self.tag.threshold
            )));
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            validation_fraction: t.validation_fraction,
            seed: self.seed,
            k_max: self.mining.k_max,
            decision_threshold: self.tag.threshold,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_docs: s.n_docs,
            vocab_size: s.vocab_size,
            phrase_bank_size: s.phrase_bank_size,
            seed: self.seed,
            planted: PlantedParams {
                seed: self.seed,
                delta: s.delta,
                noise: s.noise,
                n_layers: self.provider.layers,
                n_heads: self.provider.heads,
            },
        }
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let tree = serde_json::to_value(&self.paths)?;
        tree.get(name)
            .and_then(Value::as_str)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("missing path paths.{name} (--{name})")))
    }
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut Vec<(String, Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_toml(&key, v, out);
            }
        }
        other => out.push((
            prefix.to_string(),
            serde_json::to_value(other).unwrap_or(Value::Null),
        )),
    }
}

/// Parses `key=value`, reading the value as a TOML scalar and falling back to a string.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {text:?}")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").and_then(|v| serde_json::to_value(v).ok()))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(
    name = "phrasetag",
    version,
    about = "Unsupervised context-aware quality phrase tagging"
)]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Resolve and validate the configuration, print it, and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker thread cap.
    #[arg(long, global = true, env = "UCP_THREADS")]
    pub threads: Option<usize>,
    /// TOML file of dotted configuration keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ProviderArgs {
    /// Attention source.
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Attention archive (for `--provider archive`).
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Planted parameters written by gen-synth.
    #[arg(long)]
    pub planted: Option<PathBuf>,
    /// Gold tagging file naming the planted spans.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine core-phrase positives and sampled negatives per document.
    MineLabels {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output label file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also label gazetteer matches (core labels win on conflicts).
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        /// Replace the bundled stopword list.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        min_freq: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        /// Skip negative sampling.
        #[arg(long)]
        positives_only: bool,
        /// Summary report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Label gazetteer matches, the distant-supervision baseline.
    MatchGazetteer {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        positives_only: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with planted phrases.
    GenSynth {
        /// Directory receiving corpus.jsonl, gold.jsonl, keyphrases.jsonl and planted.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_docs: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        phrase_bank_size: Option<usize>,
        /// Within-phrase attention logit boost.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Compute attention for every sentence and write an archive.
    ExtractFeatures {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output archive.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Train the span classifier.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-epoch training report (JSON Lines).
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        validation_fraction: Option<f64>,
    },
    /// Tag every sentence of a corpus.
    Tag {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output predictions.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        decode: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank predicted phrases corpus-wide by mean logit.
    Rank {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Ranked phrase list (JSON Lines).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep only the top K phrases; with --annotations, the precision cutoff.
        #[arg(long)]
        top_k: Option<usize>,
        /// Human judgements (`phrase<TAB>0|1`) for precision at K.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Keyphrase candidate recall and F1@10.
    EvalKp {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Gold keyphrase file.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        max_candidates: Option<usize>,
        /// Compare stemmed phrases.
        #[arg(long)]
        stem: bool,
    },
    /// Exact-span micro precision, recall and F1.
    EvalTagging {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Gold tagging file.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw a seeded sample of ranked phrases for human judgement.
    SampleAnnotation {
        /// Ranked phrase list written by `rank`.
        #[arg(long)]
        ranked: Option<PathBuf>,
        /// Annotation template (`phrase<TAB>` per line).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MineLabels { .. } => "mine-labels",
            Command::MatchGazetteer { .. } => "match-gazetteer",
            Command::GenSynth { .. } => "gen-synth",
            Command::ExtractFeatures { .. } => "extract-features",
            Command::Train { .. } => "train",
            Command::Tag { .. } => "tag",
            Command::Rank { .. } => "rank",
            Command::EvalKp { .. } => "eval-kp",
            Command::EvalTagging { .. } => "eval-tagging",
            Command::SampleAnnotation { .. } => "sample-annotation",
        }
    }

    /// Folds subcommand flags into the configuration. Returns the input and
    /// output path keys the command uses.
    fn apply(
        &self,
        cfg: &mut PipelineConfig,
    ) -> (&'static [&'static str], &'static [&'static str]) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        fn provider(cfg: &mut PipelineConfig, p: &ProviderArgs) {
            if p.provider.is_some() {
                cfg.provider.kind = p.provider;
            }
            set_path(&mut cfg.paths.archive, &p.archive);
            set_path(&mut cfg.paths.planted, &p.planted);
            set_path(&mut cfg.paths.gold, &p.gold);
            set(&mut cfg.provider.layers, &p.layers);
            set(&mut cfg.provider.heads, &p.heads);
        }
        let p = &mut cfg.paths;
        match self {
            Command::MineLabels {
                corpus,
                out,
                gazetteer,
                stopwords,
                min_freq,
                k_max,
                positives_only,
                report,
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.out, out);
                set_path(&mut p.gazetteer, gazetteer);
                set_path(&mut p.stopwords, stopwords);
                set_path(&mut p.report, report);
                set(&mut cfg.mining.min_freq, min_freq);
                set(&mut cfg.mining.k_max, k_max);
                if *positives_only {
                    cfg.mining.negatives = false;
                }
                (&["corpus", "gazetteer?", "stopwords?"], &["out", "report?"])
            }
            Command::MatchGazetteer {
                corpus,
                gazetteer,
                out,
                k_max,
                positives_only,
                report,
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.gazetteer, gazetteer);
                set_path(&mut p.out, out);
                set_path(&mut p.report, report);
                set(&mut cfg.mining.k_max, k_max);
                if *positives_only {
                    cfg.mining.negatives = false;
                }
                (&["corpus", "gazetteer"], &["out", "report?"])
            }
            Command::GenSynth {
                out,
                n_docs,
                vocab_size,
                phrase_bank_size,
                delta,
                noise,
                layers,
                heads,
            } => {
                set_path(&mut p.out, out);
                let s = &mut cfg.synth;
                set(&mut s.n_docs, n_docs);
                set(&mut s.vocab_size, vocab_size);
                set(&mut s.phrase_bank_size, phrase_bank_size);
                set(&mut s.delta, delta);
                set(&mut s.noise, noise);
                set(&mut cfg.provider.layers, layers);
                set(&mut cfg.provider.heads, heads);
                (&[], &["out"])
            }
            Command::ExtractFeatures {
                corpus,
                out,
                provider: pa,
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.out, out);
                provider(cfg, pa);
                (&["corpus"], &["out"])
            }
            Command::Train {
                corpus,
                labels,
                checkpoint,
                report,
                provider: pa,
                learning_rate,
                batch_size,
                max_epochs,
                validation_fraction,
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.labels, labels);
                set_path(&mut p.checkpoint, checkpoint);
                set_path(&mut p.report, report);
                let t = &mut cfg.train;
                set(&mut t.learning_rate, learning_rate);
                set(&mut t.batch_size, batch_size);
                set(&mut t.max_epochs, max_epochs);
                set(&mut t.validation_fraction, validation_fraction);
                provider(cfg, pa);
                (&["corpus", "labels"], &["checkpoint", "report?"])
            }
            Command::Tag {
                corpus,
                checkpoint,
                out,
                provider: pa,
                threshold,
                report,
                ..
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.checkpoint, checkpoint);
                set_path(&mut p.out, out);
                set_path(&mut p.report, report);
                set(&mut cfg.tag.threshold, threshold);
                provider(cfg, pa);
                (&["corpus", "checkpoint"], &["out", "report?"])
            }
            Command::Rank {
                corpus,
                predictions,
                out,
                top_k,
                annotations,
                report,
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.predictions, predictions);
                set_path(&mut p.out, out);
                set_path(&mut p.annotations, annotations);
                set_path(&mut p.report, report);
                set(&mut cfg.eval.top_k, top_k);
                (
                    &["corpus", "predictions", "annotations?"],
                    &["out", "report?"],
                )
            }
            Command::EvalKp {
                corpus,
                predictions,
                gold,
                report,
                max_candidates,
                stem,
            } => {
                set_path(&mut p.corpus, corpus);
                set_path(&mut p.predictions, predictions);
                set_path(&mut p.gold, gold);
                set_path(&mut p.report, report);
                if max_candidates.is_some() {
                    cfg.eval.max_candidates = *max_candidates;
                }
                if *stem {
                    cfg.eval.stem = true;
                }
                (&["corpus", "predictions", "gold"], &["report"])
            }
            Command::EvalTagging {
                predictions,
                gold,
                report,
            } => {
                set_path(&mut p.predictions, predictions);
                set_path(&mut p.gold, gold);
                set_path(&mut p.report, report);
                (&["predictions", "gold"], &["report"])
            }
            Command::SampleAnnotation {
                ranked,
                out,
                top_k,
                size,
            } => {
                set_path(&mut p.ranked, ranked);
                set_path(&mut p.out, out);
                set(&mut cfg.eval.top_k, top_k);
                set(&mut cfg.eval.sample_size, size);
                (&["ranked"], &["out"])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exit codes

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_TRAINING: i32 = 6;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::RawIo(_) => EXIT_IO,
        Error::InsufficientLabels { .. } | Error::NonFinite(_) => EXIT_TRAINING,
        Error::MalformedLine { .. }
        | Error::DuplicateId { .. }
        | Error::SpanOutOfBounds { .. }
        | Error::SpanTooShort { .. }
        | Error::MissingKey(_)
        | Error::MissingFeatures(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::ChecksumMismatch { .. }
        | Error::ShapeMismatch(_)
        | Error::Corrupt(_)
        | Error::DocIdMismatch(_)
        | Error::Json(_) => EXIT_DATA,
    }
}

/// Single-line JSON error for stderr.
pub fn error_line(kind: &str, message: &str, code: i32) -> String {
    json!({"error": kind, "message": message, "exit_code": code}).to_string()
}

// ---------------------------------------------------------------------------
// Driver

/// Parses arguments and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first, EXIT_USAGE));
            return EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(e.kind(), &e.to_string(), code));
            code
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    let pairs = cli
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    cfg = cfg.with_overrides(&pairs)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Tag {
        decode: Some(d), ..
    } = &cli.command
    {
        cfg.tag.decode = d.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    }
    cli.command.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let mut scratch = cfg.clone();
    let (inputs, outputs) = cli.command.apply(&mut scratch);
    for name in inputs {
        let (name, optional) = match name.strip_suffix('?') {
            Some(n) => (n, true),
            None => (*name, false),
        };
        match cfg.require(name) {
            Ok(path) if !path.exists() => {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
                ));
            }
            Ok(_) => {}
            Err(e) if !optional => return Err(e),
            Err(_) => {}
        }
    }
    for name in outputs {
        if !name.ends_with('?') {
            cfg.require(name)?;
        }
    }
    if matches!(
        cli.command,
        Command::Train { .. } | Command::Tag { .. } | Command::ExtractFeatures { .. }
    ) {
        provider_spec(&cfg, false)?;
    }
    if cli.dry_run {
        println!(
            "{}",
            serde_json::to_string(&json!({"command": cli.command.name(), "config": cfg}))?
        );
        return Ok(());
    }
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let echo = serde_json::to_value(&cfg)?;
    match &cli.command {
        Command::MineLabels { .. } => mine_labels(&cfg, &echo, true),
        Command::MatchGazetteer { .. } => mine_labels(&cfg, &echo, false),
        Command::GenSynth { .. } => gen_synth(&cfg),
        Command::ExtractFeatures { .. } => extract_features(&cfg),
        Command::Train { .. } => train_cmd(&cfg),
        Command::Tag { .. } => tag_cmd(&cfg, &echo),
        Command::Rank { .. } => rank_cmd(&cfg, &echo),
        Command::EvalKp { .. } => eval_kp(&cfg, &echo),
        Command::EvalTagging { .. } => eval_tagging(&cfg, &echo),
        Command::SampleAnnotation { .. } => sample_annotation(&cfg),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_docs(cfg: &PipelineConfig) -> Result<Vec<Document>> {
    load_corpus(&cfg.require("corpus")?, CorpusFormat::JsonLines)
}

/// Resolves the attention provider. With `build` false only the inputs are checked.
fn provider_spec(cfg: &PipelineConfig, build: bool) -> Result<Option<ProviderSpec>> {
    let kind = match cfg.provider.kind {
        Some(k) => k,
        None if cfg.paths.archive.is_some() => ProviderKind::Archive,
        None => {
            return Err(Error::Config(
                "no attention provider: pass --provider or --archive".into(),
            ))
        }
    };
    let spec = match kind {
        ProviderKind::Archive => {
            let path = cfg.require("archive")?;
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "archive does not exist"),
                ));
            }
            ProviderSpec::Archive(path)
        }
        ProviderKind::SyntheticHash => ProviderSpec::SyntheticHash {
            seed: cfg.seed,
            n_layers: cfg.provider.layers,
            n_heads: cfg.provider.heads,
        },
        ProviderKind::SyntheticPlanted => {
            let planted = cfg.require("planted")?;
            let gold = cfg.require("gold")?;
            for p in [&planted, &gold] {
                if !p.exists() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
                    ));
                }
            }
            if !build {
                return Ok(None);
            }
            let text = fs::read_to_string(&planted).map_err(|e| Error::io(&planted, e))?;
            let params: PlantedParams = serde_json::from_str(&text)?;
            let gold: Vec<GoldTaggingRecord> = jsonl::read(&gold)?;
            ProviderSpec::SyntheticPlanted {
                params,
                spans: planted_spans(&gold),
            }
        }
    };
    Ok(Some(spec))
}

fn build_provider(cfg: &PipelineConfig) -> Result<Box<dyn AttentionProvider>> {
    provider_spec(cfg, true)?.expect("built").build()
}

fn mine_labels(cfg: &PipelineConfig, echo: &Value, core: bool) -> Result<()> {
    let docs = load_docs(cfg)?;
    let stopwords = match &cfg.paths.stopwords {
        Some(path) => Stopwords::from_file(path)?,
        None => Stopwords::bundled().clone(),
    };
    let opts = MiningOptions {
        min_freq: cfg.mining.min_freq,
        k_max: cfg.mining.k_max,
        stopwords: &stopwords,
    };
    let gazetteer = match &cfg.paths.gazetteer {
        Some(path) => Some(Gazetteer::from_file(path)?),
        None => None,
    };
    let per_doc: Vec<Vec<SpanLabel>> = docs
        .par_iter()
        .map(|doc| {
            let mut sets = Vec::new();
            if core {
                sets.push(mine_core_phrases_with(doc, &opts)?);
            }
            if let Some(g) = &gazetteer {
                sets.push(gazetteer_match(doc, g, cfg.mining.k_max));
            }
            let positives = merge_labels(sets);
            let mut labels = positives.clone();
            if cfg.mining.negatives {
                labels.extend(sample_negatives(
                    doc,
                    &positives,
                    cfg.mining.k_max,
                    doc_seed(cfg.seed, &doc.id),
                ));
            }
            labels.sort_by_key(|l| (l.span.key(), l.polarity));
            Ok(labels)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<SpanLabel> = per_doc.into_iter().flatten().collect();
    write_labels(&cfg.require("out")?, &labels)?;

    let positives = labels
        .iter()
        .filter(|l| l.polarity == Polarity::Positive)
        .count();
    log::info!(
        "{} documents, {} positive and {} negative labels",
        docs.len(),
        positives,
        labels.len() - positives
    );
    if let Some(path) = &cfg.paths.report {
        let mut by_source: BTreeMap<String, usize> = BTreeMap::new();
        for l in &labels {
            *by_source
                .entry(
                    serde_json::to_value(l.source)?
                        .as_str()
                        .unwrap_or("")
                        .to_string(),
                )
                .or_default() += 1;
        }
        write_json(
            path,
            &json!({
                "task": if core { "mine-labels" } else { "match-gazetteer" },
                "n_items": {"documents": docs.len(), "positives": positives, "negatives": labels.len() - positives},
                "by_source": by_source,
                "config": echo,
            }),
        )?;
    }
    Ok(())
}

fn gen_synth(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.require("out")?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let synth = generate_synthetic_corpus(&cfg.synth_config());
    write_corpus(&dir.join("corpus.jsonl"), &synth.records)?;
    jsonl::write(&dir.join("gold.jsonl"), &synth.gold)?;

    let mut keyphrases: Vec<GoldKeyphraseRecord> = synth
        .records
        .iter()
        .map(|r| GoldKeyphraseRecord {
            id: r.id.clone(),
            keyphrases: Vec::new(),
        })
        .collect();
    let index: BTreeMap<&str, usize> = synth
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let docs: Vec<Document> = synth
        .records
        .iter()
        .map(|r| Document::new(r.id.clone(), r.text.clone()))
        .collect();
    for g in &synth.gold {
        let i = index[g.id.as_str()];
        for s in &g.spans {
            let phrase = docs[i].sentences[g.sent_idx].words[s[0]..s[1]].join(" ");
            if !keyphrases[i].keyphrases.contains(&phrase) {
                keyphrases[i].keyphrases.push(phrase);
            }
        }
    }
    jsonl::write(&dir.join("keyphrases.jsonl"), &keyphrases)?;
    write_json(
        &dir.join("planted.json"),
        &serde_json::to_value(&synth.planted)?,
    )
}

fn extract_features(cfg: &PipelineConfig) -> Result<()> {
    let docs = load_docs(cfg)?;
    let provider = build_provider(cfg)?;
    let jobs: Vec<(SentKey, &crate::corpus::SentenceTokens)> = docs
        .iter()
        .flat_map(|d| {
            d.sentences
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.is_empty())
                .map(move |(i, s)| (SentKey::new(d.id.clone(), i), s))
        })
        .collect();
    let tensors: Vec<AttentionTensor> = jobs
        .par_iter()
        .map(|(key, sentence)| compute_attention(provider.as_ref(), key, sentence))
        .collect::<Result<_>>()?;
    let truncated = jobs
        .iter()
        .filter(|(_, s)| s.truncated_len() < s.len())
        .count();
    if truncated > 0 {
        log::warn!(
            "{truncated} sentence(s) truncated to {} words",
            crate::corpus::MAX_SENTENCE_WORDS
        );
    }
    write_archive(&cfg.require("out")?, &tensors)
}

fn train_cmd(cfg: &PipelineConfig) -> Result<()> {
    let docs = load_docs(cfg)?;
    let labels = read_labels(&cfg.require("labels")?, &docs)?;
    let provider = build_provider(cfg)?;
    let outcome = train(&docs, &labels, provider.as_ref(), &cfg.train_config())?;
    if outcome.dropped_truncated > 0 {
        log::warn!(
            "{} label(s) beyond the sentence truncation limit were skipped",
            outcome.dropped_truncated
        );
    }
    save_checkpoint(&cfg.require("checkpoint")?, &outcome.checkpoint)?;
    if let Some(path) = &cfg.paths.report {
        jsonl::write(path, &outcome.epochs)?;
    }
    log::info!(
        "best epoch {} with validation F1 {:.4}",
        outcome.checkpoint.meta.best_epoch,
        outcome.checkpoint.meta.val_f1
    );
    Ok(())
}

fn tag_cmd(cfg: &PipelineConfig, echo: &Value) -> Result<()> {
    let docs = load_docs(cfg)?;
    let checkpoint = load_checkpoint(&cfg.require("checkpoint")?)?;
    let provider = build_provider(cfg)?;
    let tagger = Tagger::new(
        &checkpoint.params,
        provider.as_ref(),
        cfg.tag.threshold,
        cfg.tag.decode,
    )?;
    let out = tagger.tag_corpus(&docs)?;
    if out.skipped_truncated > 0 {
        log::warn!(
            "{} candidate span(s) beyond the truncation limit were skipped",
            out.skipped_truncated
        );
    }
    write_predictions(&cfg.require("out")?, &out.predictions)?;
    if let Some(path) = &cfg.paths.report {
        write_json(
            path,
            &json!({
                "task": "tag",
                "n_items": {"documents": docs.len(), "predictions": out.predictions.len(), "skipped_truncated": out.skipped_truncated},
                "config": echo,
            }),
        )?;
    }
    Ok(())
}

fn rank_cmd(cfg: &PipelineConfig, echo: &Value) -> Result<()> {
    let docs = load_docs(cfg)?;
    let predictions = read_predictions(&cfg.require("predictions")?, &docs)?;
    let ranked = rank_phrases_global(&predictions);
    let top = &ranked[..cfg.eval.top_k.min(ranked.len())];
    jsonl::write(&cfg.require("out")?, top)?;
    if let Some(path) = &cfg.paths.annotations {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report = precision_at_k(&ranked, cfg.eval.top_k, &parse_annotations(&text)?)
            .with_config(echo.clone());
        let dest = cfg.require("report")?;
        report.write(&dest)?;
    }
    Ok(())
}

fn eval_kp(cfg: &PipelineConfig, echo: &Value) -> Result<()> {
    let docs = load_docs(cfg)?;
    let predictions = read_predictions(&cfg.require("predictions")?, &docs)?;
    let gold: Vec<GoldKeyphraseRecord> = jsonl::read(&cfg.require("gold")?)?;
    let extracted = keyphrase_docs(
        &candidates_from_predictions(&docs, &predictions),
        cfg.eval.max_candidates,
    );
    let mut echo = echo.clone();
    echo["tfidf"] = json!("tf * (ln((1 + M) / (1 + df)) + 1)");
    let report = evaluate_keyphrase(
        &extracted,
        &gold,
        KeyphraseOptions {
            stem: cfg.eval.stem,
        },
    )?
    .with_config(echo);
    report.write(&cfg.require("report")?)
}

fn eval_tagging(cfg: &PipelineConfig, echo: &Value) -> Result<()> {
    let predictions: Vec<PredictionRecord> = jsonl::read(&cfg.require("predictions")?)?;
    let gold: Vec<GoldTaggingRecord> = jsonl::read(&cfg.require("gold")?)?;
    let pred: Vec<SpanKey> = predictions
        .into_iter()
        .map(|p| (p.doc_id, p.sent_idx, p.start, p.end))
        .collect();
    let report = evaluate_tagging(&pred, &gold_keys(&gold)).with_config(echo.clone());
    report.write(&cfg.require("report")?)
}

fn sample_annotation(cfg: &PipelineConfig) -> Result<()> {
    let ranked: Vec<RankedPhrase> = jsonl::read(&cfg.require("ranked")?)?;
    let sample = sample_for_annotation(&ranked, cfg.eval.top_k, cfg.eval.sample_size, cfg.seed);
    let path = cfg.require("out")?;
    fs::write(&path, annotation_template(&sample)).map_err(|e| Error::io(&path, e))
}
