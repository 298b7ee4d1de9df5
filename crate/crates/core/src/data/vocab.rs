use std::collections::HashMap;

use super::{DataError, Entry};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const WORD_PREFIX: usize = 4;
pub const CONTEXT_PREFIX: usize = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "word:", "context:"];

/// Token/id bijection. Specials occupy ids `0..6`; corpus tokens follow in
/// descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_freq` times, at most `max_size` of
    /// them (specials not counted). Everything else encodes as `<unk>`.
    pub fn build(entries: &[Entry], min_freq: usize, max_size: usize) -> Result<Self, DataError> {
        if entries.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for e in entries {
            for t in e.word_tokens().iter().chain(e.context_tokens()).chain(e.definition_tokens()) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Self::from_tokens(SPECIALS.iter().copied().chain(ranked.into_iter().map(|(t, _)| t)).map(String::from).collect())
    }

    /// Rebuilds a vocabulary from its id-ordered token list, e.g. one read
    /// back from a vocab file or checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(DataError::InvalidVocab("missing reserved special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}
