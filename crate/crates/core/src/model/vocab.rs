//! Byte-level vocabulary. Every byte is its own token; three special ids
//! sit above the byte range. Lossless on arbitrary byte strings, no external
//! assets.

use serde::{Deserialize, Serialize};

/// Byte-level vocabulary: ids 0..=255 are raw bytes, specials follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub pad: usize,
    pub bos: usize,
    pub sep: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            pad: 256,
            bos: 257,
            sep: 258,
        }
    }
}

impl Vocab {
    pub const fn size(&self) -> usize {
        259
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= 256
    }

    /// Byte-level encoding; one token per byte.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(|b| b as usize).collect()
    }

    /// Inverse of [`Vocab::encode`]. Special tokens are dropped; byte
    /// sequences that are not valid UTF-8 are replaced lossily (only
    /// reachable when decoding sampled ids, never round-tripped text).
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Byte-level ids for a text, no specials attached.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    vocab.encode(text)
}
