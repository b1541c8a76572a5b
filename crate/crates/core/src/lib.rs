//! Unsupervised context-aware quality phrase tagging.
//!
//! The pipeline mines per-document core phrases as silver labels
//! ([`labelgen`]), crops word-level attention maps into span features
//! ([`attnfeat`]), trains a small convolutional span classifier
//! ([`classifier`]), tags sentences ([`tagger`]) and evaluates the
//! results on phrase ranking, keyphrase extraction and span tagging
//! ([`eval`]). [`cli`] wires everything into the `phrasetag` binary.

pub mod attnfeat;
pub mod classifier;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod hash;
pub mod jsonl;
pub mod labelgen;
pub mod tagger;

pub use error::{Error, Result};
