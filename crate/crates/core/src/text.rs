//! Character-level tokenization of isolated keywords.
//!
//! Words are lowercased and stripped to a-z, then each character maps to
//! its alphabet index (a=0 .. z=25). Index 26 is reserved as the padding id
//! for batched sequences; the embedding table is sized accordingly.

use crate::{CoreError, Result};

/// Number of real character tokens.
pub const VOCAB_SIZE: usize = 26;
/// Reserved padding id used when batching variable-length words.
pub const PAD_ID: usize = 26;
/// Embedding table rows: 26 characters plus the pad id.
pub const TABLE_SIZE: usize = VOCAB_SIZE + 1;

/// Character indices for one keyword, all in `[0, 25]`, non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }
}

/// Lowercase and drop every character outside a-z.
pub fn normalize_word(raw: &str) -> Result<String> {
    let normalized: String = raw
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_ascii_lowercase())
        .collect();
    if normalized.is_empty() {
        return Err(CoreError::Text(format!(
            "word {raw:?} has no alphabetic content"
        )));
    }
    Ok(normalized)
}

/// Map a normalized word to character indices, order preserved.
pub fn tokenize(word: &str) -> Result<TokenSequence> {
    if word.is_empty() {
        return Err(CoreError::Text("cannot tokenize an empty word".into()));
    }
    let tokens = word
        .bytes()
        .map(|b| {
            if b.is_ascii_lowercase() {
                Ok((b - b'a') as usize)
            } else {
                Err(CoreError::Text(format!(
                    "non-normalized character {:?} in {word:?}",
                    b as char
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence { tokens })
}

/// Inverse of [`tokenize`].
pub fn detokenize(seq: &TokenSequence) -> String {
    seq.tokens
        .iter()
        .map(|&t| (b'a' + t as u8) as char)
        .collect()
}
