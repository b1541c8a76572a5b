//! Documents, sentence splitting, tokenization and the stopword predicate.
//!
//! Tokenization is deliberately simple and fully deterministic:
//!
//! * text is split on Unicode whitespace into chunks and lowercased;
//! * leading and trailing non-alphanumeric characters of a chunk become
//!   one-character tokens of their own, everything between the first and
//!   last alphanumeric character stays one word (so `state-of-the-art`
//!   and `don't` survive intact);
//! * a sentence ends after a chunk that carries a word followed by `.`,
//!   `!` or `?`, when the next chunk starts with an uppercase letter or a
//!   digit, unless the chunk is one of the known abbreviations.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Hard cap on the words of a sentence that ever reach the attention provider.
pub const MAX_SENTENCE_WORDS: usize = 64;

const ABBREVIATIONS: &[&str] = &["e.g.", "i.e.", "fig.", "eq."];

/// The words of one sentence plus where it starts in the document word sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceTokens {
    pub words: Vec<String>,
    pub doc_offset: usize,
}

impl SentenceTokens {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Word count after the provider truncation limit.
    pub fn truncated_len(&self) -> usize {
        self.words.len().min(MAX_SENTENCE_WORDS)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub raw_text: String,
    pub sentences: Vec<SentenceTokens>,
}

impl Document {
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let sentences = tokenize_and_split(&raw_text);
        Document {
            id: id.into(),
            raw_text,
            sentences,
        }
    }

    /// Builds a document from already tokenized sentences; `raw_text` is their whitespace join.
    pub fn from_sentences(id: impl Into<String>, sentences: Vec<Vec<String>>) -> Self {
        let raw_text = sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" ");
        let mut offset = 0;
        let sentences = sentences
            .into_iter()
            .filter(|s| !s.is_empty())
            .map(|words| {
                let s = SentenceTokens {
                    doc_offset: offset,
                    words,
                };
                offset += s.words.len();
                s
            })
            .collect();
        Document {
            id: id.into(),
            raw_text,
            sentences,
        }
    }

    /// The document as one contiguous word sequence.
    pub fn words(&self) -> Vec<&str> {
        self.sentences
            .iter()
            .flat_map(|s| s.words.iter().map(String::as_str))
            .collect()
    }

    pub fn n_words(&self) -> usize {
        self.sentences.iter().map(SentenceTokens::len).sum()
    }

    /// Maps a document word position to `(sent_idx, index within sentence)`.
    pub fn locate(&self, pos: usize) -> Option<(usize, usize)> {
        let idx = self
            .sentences
            .partition_point(|s| s.doc_offset + s.len() <= pos);
        let s = self.sentences.get(idx)?;
        (pos >= s.doc_offset).then(|| (idx, pos - s.doc_offset))
    }
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let lower: Vec<char> = chunk.to_lowercase().chars().collect();
    let first = lower.iter().position(|c| c.is_alphanumeric());
    let last = lower.iter().rposition(|c| c.is_alphanumeric());
    match (first, last) {
        (Some(first), Some(last)) => {
            out.extend(lower[..first].iter().map(|c| c.to_string()));
            out.push(lower[first..=last].iter().collect());
            out.extend(lower[last + 1..].iter().map(|c| c.to_string()));
        }
        _ => out.extend(lower.iter().map(|c| c.to_string())),
    }
}

/// Tokenizes text without sentence splitting; used for phrases and gazetteer entries.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        split_chunk(chunk, &mut out);
    }
    out
}

/// Lowercased, tokenizer-normalized form of a phrase: its tokens joined by single spaces.
pub fn normalize_phrase(text: &str) -> String {
    tokenize_words(text).join(" ")
}

fn ends_sentence(chunk: &str, prev: Option<&str>, next: Option<&str>) -> bool {
    let Some(last) = chunk.chars().last() else {
        return false;
    };
    if !matches!(last, '.' | '!' | '?') {
        return false;
    }
    let core = chunk.trim_end_matches(['.', '!', '?']);
    if !core.chars().any(char::is_alphanumeric) {
        return false;
    }
    let starts_new = next
        .and_then(|n| n.chars().next())
        .is_some_and(|c| c.is_uppercase() || c.is_ascii_digit());
    if !starts_new {
        return false;
    }
    let lower = chunk
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return false;
    }
    if lower == "al." && prev.is_some_and(|p| p.eq_ignore_ascii_case("et")) {
        return false;
    }
    true
}

/// Splits raw text into sentences of lowercased word tokens.
pub fn tokenize_and_split(raw_text: &str) -> Vec<SentenceTokens> {
    let chunks: Vec<&str> = raw_text.split_whitespace().collect();
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    let mut offset = 0;
    for (i, chunk) in chunks.iter().enumerate() {
        split_chunk(chunk, &mut current);
        let prev = i.checked_sub(1).map(|p| chunks[p]);
        if ends_sentence(chunk, prev, chunks.get(i + 1).copied()) {
            let words = std::mem::take(&mut current);
            let len = words.len();
            sentences.push(SentenceTokens {
                words,
                doc_offset: offset,
            });
            offset += len;
        }
    }
    if !current.is_empty() {
        sentences.push(SentenceTokens {
            words: current,
            doc_offset: offset,
        });
    }
    sentences
}

/// Supported corpus file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    JsonLines,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" => Ok(CorpusFormat::JsonLines),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

/// Loads a corpus, one [`Document`] per record in file order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>> {
    match format {
        CorpusFormat::JsonLines => {}
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut docs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if seen.insert(record.id.clone(), idx + 1).is_some() {
            return Err(Error::DuplicateId {
                id: record.id,
                line: idx + 1,
            });
        }
        docs.push(Document::new(record.id, record.text));
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    jsonl::write(path, records)
}

/// One line of the gold tagging file; spans are `[start, end)` word indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTaggingRecord {
    pub id: String,
    pub sent_idx: usize,
    pub spans: Vec<[usize; 2]>,
}

/// One line of the gold keyphrase file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldKeyphraseRecord {
    pub id: String,
    pub keyphrases: Vec<String>,
}

/// A case-insensitive stopword set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords {
    words: HashSet<String>,
}

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords.txt");

impl Stopwords {
    /// Parses the stopword file format: one word per line, `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_lowercase)
            .collect();
        Stopwords { words }
    }

    pub fn bundled() -> &'static Stopwords {
        static BUNDLED: OnceLock<Stopwords> = OnceLock::new();
        BUNDLED.get_or_init(|| Stopwords::parse(BUNDLED_STOPWORDS))
    }

    pub fn bundled_text() -> &'static str {
        BUNDLED_STOPWORDS
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Stopwords::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        if word.chars().any(char::is_uppercase) {
            self.words.contains(&word.to_lowercase())
        } else {
            self.words.contains(word)
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// Membership in the bundled stopword list.
pub fn is_stopword(word: &str) -> bool {
    Stopwords::bundled().contains(word)
}

/// True for tokens without any alphanumeric character.
pub fn is_punctuation(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

/// True for purely numeric tokens such as `42`, `3.5` or `1,000`.
pub fn is_numeric(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
        && token
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}
