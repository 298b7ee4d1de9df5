//! Dictionary records, vocabulary, prompt splicing and padded batches.

mod batch;
pub mod demo;
mod loader;
mod tokenize;
mod vocab;

pub use batch::{make_batches, splice, Batch, Spliced, TargetOccurrence};
pub use loader::{load_dataset, parse_dataset, DatasetFormat, LoadReport, Rejection};
pub use tokenize::tokenize;
pub use vocab::{Vocab, BOS, CONTEXT_PREFIX, EOS, PAD, UNK, WORD_PREFIX};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: target {word:?} not found in context")]
    TargetNotFound { line: usize, word: String },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// The target word or phrase located inside its context. This is all the
/// model sees at inference time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    word_tokens: Vec<String>,
    context_tokens: Vec<String>,
    /// Half-open `[start, end)` into `context_tokens`.
    target_span: (usize, usize),
}

impl Query {
    pub fn new(word_tokens: Vec<String>, context_tokens: Vec<String>, target_span: (usize, usize)) -> Result<Self, DataError> {
        let (i, j) = target_span;
        if word_tokens.is_empty() {
            return Err(DataError::InvalidEntry("empty target word".into()));
        }
        if !(i < j && j <= context_tokens.len()) {
            return Err(DataError::InvalidEntry(format!(
                "span [{i}, {j}) outside context of length {}",
                context_tokens.len()
            )));
        }
        if context_tokens[i..j] != word_tokens[..] {
            return Err(DataError::InvalidEntry(format!(
                "context[{i}..{j}] = {:?} differs from word {:?}",
                &context_tokens[i..j],
                word_tokens
            )));
        }
        Ok(Self { word_tokens, context_tokens, target_span })
    }

    /// Locates `word_tokens` in `context_tokens` by first exact contiguous
    /// match. Also returns how many matches there were.
    pub fn locate(word_tokens: Vec<String>, context_tokens: Vec<String>) -> Option<(Self, usize)> {
        let w = word_tokens.len();
        if w == 0 || w > context_tokens.len() {
            return None;
        }
        let hits: Vec<usize> = (0..=context_tokens.len() - w)
            .filter(|&i| context_tokens[i..i + w] == word_tokens[..])
            .collect();
        let first = *hits.first()?;
        let q = Self::new(word_tokens, context_tokens, (first, first + w)).ok()?;
        Some((q, hits.len()))
    }

    pub fn word_tokens(&self) -> &[String] {
        &self.word_tokens
    }

    pub fn context_tokens(&self) -> &[String] {
        &self.context_tokens
    }

    pub fn target_span(&self) -> (usize, usize) {
        self.target_span
    }
}

/// One dictionary record: a located target plus its gold definition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    query: Query,
    definition_tokens: Vec<String>,
}

impl Entry {
    pub fn new(query: Query, definition_tokens: Vec<String>) -> Result<Self, DataError> {
        if definition_tokens.is_empty() {
            return Err(DataError::InvalidEntry("empty definition".into()));
        }
        Ok(Self { query, definition_tokens })
    }

    /// Tokenizes raw text fields and locates the target in the context.
    pub fn from_text(word: &str, context: &str, definition: &str) -> Result<Self, DataError> {
        let (word, context) = (tokenize(word), tokenize(context));
        let joined = word.join(" ");
        let (q, _) = Query::locate(word, context).ok_or(DataError::TargetNotFound { line: 0, word: joined })?;
        Self::new(q, tokenize(definition))
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn word_tokens(&self) -> &[String] {
        &self.query.word_tokens
    }

    pub fn context_tokens(&self) -> &[String] {
        &self.query.context_tokens
    }

    pub fn target_span(&self) -> (usize, usize) {
        self.query.target_span
    }

    pub fn definition_tokens(&self) -> &[String] {
        &self.definition_tokens
    }
}

/// Entry counts and mean lengths of a split, in tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub entries: usize,
    pub distinct_targets: usize,
    pub mean_context_len: f64,
    pub mean_definition_len: f64,
}

impl SplitStats {
    pub fn of(entries: &[Entry]) -> Self {
        let n = entries.len().max(1) as f64;
        let distinct: std::collections::BTreeSet<&[String]> = entries.iter().map(Entry::word_tokens).collect();
        Self {
            entries: entries.len(),
            distinct_targets: distinct.len(),
            mean_context_len: entries.iter().map(|e| e.context_tokens().len()).sum::<usize>() as f64 / n,
            mean_definition_len: entries.iter().map(|e| e.definition_tokens().len()).sum::<usize>() as f64 / n,
        }
    }
}
