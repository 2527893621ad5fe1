//! Whitespace-plus-punctuation tokenizer over a fixed vocabulary.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";

/// Token strings; index 0 is always `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::config(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// One token per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// `[UNK]` followed by every segment of `texts`, most frequent first,
    /// ties in lexicographic order, capped at `max_size` entries in total.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in segment(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| w != UNK).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(words.into_iter().take(max_size.saturating_sub(1)).map(|(w, _)| w));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases, splits on whitespace and splits every ASCII punctuation
/// character into its own segment.
pub fn segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug)]
pub struct Tokenizer {
    vocab: Vocab,
    max_len: usize,
    truncations: AtomicUsize,
}

impl Clone for Tokenizer {
    fn clone(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            max_len: self.max_len,
            truncations: AtomicUsize::new(self.truncation_count()),
        }
    }
}

impl Tokenizer {
    pub fn new(vocab: Vocab, max_len: usize) -> Self {
        Self {
            vocab,
            max_len,
            truncations: AtomicUsize::new(0),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Sequences longer than `max_len` are cut and counted.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids: Vec<usize> = segment(text).iter().map(|w| self.vocab.id(w)).collect();
        if ids.len() > self.max_len {
            ids.truncate(self.max_len);
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        TokenSequence::new(ids)
    }

    /// Maps already-segmented words, lowercasing each one. Input longer
    /// than `limit` is cut and counted.
    pub fn encode_words(&self, words: &[String], limit: usize) -> Result<TokenSequence> {
        if words.len() > limit {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        TokenSequence::new(
            words
                .iter()
                .take(limit)
                .map(|w| self.vocab.id(&w.to_lowercase()))
                .collect(),
        )
    }

    pub fn truncation_count(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }
}
