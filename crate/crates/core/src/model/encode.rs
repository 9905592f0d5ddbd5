//! Packing a (prompt, response) pair into one token sequence:
//! `BOS + prompt + SEP + response`. When the pair exceeds the model's
//! context, the oldest prompt tokens are dropped first; the response is
//! never cut, both losses are functions of its tokens.

use super::{ModelConfig, ModelError, Vocab};

/// One encoded (prompt, response) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub tokens: Vec<usize>,
    /// Number of prompt tokens retained after truncation.
    pub prompt_len: usize,
    /// Half-open token index range of the response.
    pub response_span: (usize, usize),
    /// Length excluding trailing PAD (pairs built here carry no PAD; padded
    /// variants appear only through [`EncodedPair::padded_to`]).
    pub attn_len: usize,
}

impl EncodedPair {
    pub fn response_len(&self) -> usize {
        self.response_span.1 - self.response_span.0
    }

    /// Copy with trailing PAD up to `len`. Used to check PAD neutrality and
    /// to build fixed-width batches.
    pub fn padded_to(&self, len: usize, vocab: &Vocab) -> EncodedPair {
        let mut tokens = self.tokens.clone();
        while tokens.len() < len {
            tokens.push(vocab.pad);
        }
        EncodedPair {
            tokens,
            prompt_len: self.prompt_len,
            response_span: self.response_span,
            attn_len: self.attn_len,
        }
    }
}

/// Encode `BOS + prompt + SEP + response`, left-truncating the prompt to fit
/// `cfg.max_seq_len`.
pub fn encode_pair(
    prompt: &str,
    response: &str,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<EncodedPair, ModelError> {
    let response_toks = vocab.encode(response);
    if response_toks.is_empty() {
        return Err(ModelError::EmptyResponse);
    }
    // BOS and SEP always present.
    let overhead = 2;
    if response_toks.len() + overhead > cfg.max_seq_len {
        return Err(ModelError::ResponseTooLong {
            response_tokens: response_toks.len(),
            max_seq_len: cfg.max_seq_len,
        });
    }
    let prompt_toks = vocab.encode(prompt);
    let budget = cfg.max_seq_len - overhead - response_toks.len();
    let kept = if prompt_toks.len() > budget {
        &prompt_toks[prompt_toks.len() - budget..]
    } else {
        &prompt_toks[..]
    };

    let mut tokens = Vec::with_capacity(overhead + kept.len() + response_toks.len());
    tokens.push(vocab.bos);
    tokens.extend_from_slice(kept);
    tokens.push(vocab.sep);
    let start = tokens.len();
    tokens.extend_from_slice(&response_toks);
    let end = tokens.len();

    Ok(EncodedPair {
        attn_len: tokens.len(),
        tokens,
        prompt_len: kept.len(),
        response_span: (start, end),
    })
}
