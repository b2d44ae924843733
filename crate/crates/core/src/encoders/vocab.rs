use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: &str = "[cls]";
pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";

/// Closed word-level vocabulary with dense ids; specials come first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// `[cls]`, `[pad]`, `[unk]` followed by `words` in order (duplicates dropped).
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = vec![CLS.into(), PAD.into(), UNK.into()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        tokens.into()
    }

    /// Vocabulary of the synthetic report grammar and zero-shot prompts.
    pub fn synthetic() -> Self {
        Self::from_words(&crate::datagen::grammar_words())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn cls_id(&self) -> usize {
        0
    }

    pub fn pad_id(&self) -> usize {
        1
    }

    pub fn unk_id(&self) -> usize {
        2
    }

    /// Checks the dense-id and special-token invariants.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < 3 || self.tokens[0] != CLS || self.tokens[1] != PAD || self.tokens[2] != UNK {
            return Err(Error::Input("vocabulary must start with [cls], [pad], [unk]".into()));
        }
        if self.index.len() != self.tokens.len() {
            return Err(Error::Input("vocabulary has duplicate tokens".into()));
        }
        Ok(())
    }
}

/// Lowercases and splits on whitespace, emitting each punctuation mark as
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
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
    out
}

/// `[cls]` + word ids, padded with `[pad]` or truncated to exactly `max_len`.
pub fn tokenize(report: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if report.trim().is_empty() {
        return Err(Error::Input("cannot tokenize empty text".into()));
    }
    if max_len == 0 {
        return Err(Error::param("max_len", "must be at least 1"));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    for w in split_words(report) {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&w).unwrap_or(vocab.unk_id()));
    }
    ids.resize(max_len, vocab.pad_id());
    Ok(ids)
}
