//! Text perturbation applied to the OCR text of a source page before it is
//! re-rendered. Any deterministic text-to-text function can be plugged in.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub trait ParaphraseHook: Send + Sync {
    /// Rewrite `text`. Must be a pure function of `(text, seed)`.
    fn paraphrase(&self, text: &str, seed: u64) -> std::result::Result<String, String>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl ParaphraseHook for IdentityHook {
    fn paraphrase(&self, text: &str, _seed: u64) -> std::result::Result<String, String> {
        Ok(text.to_string())
    }
}

/// Default hook: shuffle sentence order, then drop each word independently.
///
/// Stream protocol (ChaCha8 seeded with `seed`): one `shuffle` of the sentence
/// list, then one `f64` draw per word in shuffled order; a word is dropped when
/// its draw is `< dropout`. If every word is dropped the first word of the
/// shuffled text is kept. Output words are joined by single spaces.
#[derive(Debug, Clone, Copy)]
pub struct ShuffleDropoutHook {
    pub dropout: f64,
}

impl Default for ShuffleDropoutHook {
    fn default() -> Self {
        Self { dropout: 0.1 }
    }
}

/// Split after `.`, `!` or `?` when followed by whitespace or the end of text.
pub fn split_sentences(text: &str) -> Vec<Vec<&str>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for word in text.split_whitespace() {
        current.push(word);
        if word.ends_with(['.', '!', '?']) {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

impl ParaphraseHook for ShuffleDropoutHook {
    fn paraphrase(&self, text: &str, seed: u64) -> std::result::Result<String, String> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut sentences = split_sentences(text);
        sentences.shuffle(&mut rng);
        let words: Vec<&str> = sentences.into_iter().flatten().collect();
        let mut kept: Vec<&str> = words
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() >= self.dropout)
            .collect();
        if kept.is_empty() {
            if let Some(first) = words.first() {
                kept.push(first);
            }
        }
        Ok(kept.join(" "))
    }
}

/// Run a hook, attaching `source_id` to failures and rejecting empty output
/// for non-empty input.
pub fn paraphrase(text: &str, source_id: &str, hook: &dyn ParaphraseHook, seed: u64) -> Result<String> {
    let out = hook.paraphrase(text, seed).map_err(|message| Error::Hook {
        source_id: source_id.to_string(),
        message,
    })?;
    if out.trim().is_empty() && !text.trim().is_empty() {
        return Err(Error::Hook {
            source_id: source_id.to_string(),
            message: "hook returned empty text".into(),
        });
    }
    Ok(out)
}
