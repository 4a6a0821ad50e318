//! Frequency vocabulary and the three per-page token features
//! (word ids, attention mask, segment ids).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::record::PageRecord;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercase, then split on whitespace; every punctuation / symbol character
/// becomes a token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() && !ch.is_control() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Build from raw texts. Ties in frequency are broken lexicographically.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Result<Self> {
        if max_vocab < 5 {
            return Err(Error::Config(format!("max_vocab must be at least 5, got {max_vocab}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_vocab - SPECIALS.len());
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(tokens.into())
    }
}

/// Vocabulary over the `full_text` of the given records.
pub fn build_vocabulary(records: &[PageRecord], max_vocab: usize) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::Input("cannot build a vocabulary from zero records".into()));
    }
    Vocabulary::from_texts(records.iter().map(|r| r.full_text.as_str()), max_vocab)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFeatures {
    pub input_word_ids: Vec<u32>,
    pub input_mask: Vec<u8>,
    pub input_type_ids: Vec<u32>,
}

impl TokenFeatures {
    pub fn len(&self) -> usize {
        self.input_word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_word_ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn valid_len(&self) -> usize {
        self.input_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// `[CLS] tokens... [SEP]` truncated to `seq_len` (keeping the final `[SEP]`)
/// and padded with `[PAD]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, seq_len: usize) -> TokenFeatures {
    assert!(seq_len >= 3, "sequence length must be at least 3");
    let mut ids = Vec::with_capacity(seq_len);
    ids.push(CLS_ID);
    ids.extend(split_tokens(text).iter().take(seq_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    let valid = ids.len();
    ids.resize(seq_len, PAD_ID);
    let mut mask = vec![1u8; valid];
    mask.resize(seq_len, 0);
    TokenFeatures {
        input_word_ids: ids,
        input_mask: mask,
        input_type_ids: vec![0; seq_len],
    }
}
