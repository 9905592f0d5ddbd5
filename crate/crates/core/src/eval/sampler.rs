//! Candidate fabrication for best-of-N: seeded ancestral sampling from the
//! policy head. Special tokens are masked out, so every candidate is a raw
//! byte string of fixed length; duplicates are allowed.

use super::EvalError;
use crate::model::{DualHeadModel, EncodedPair};
use crate::rng::{derive_seed, Rng};

pub const DEFAULT_SAMPLE_TOKENS: usize = 24;

/// Sample `n` responses to `prompt` at the given temperature.
pub fn sample_candidates(
    model: &DualHeadModel,
    prompt: &str,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<String>, EvalError> {
    sample_candidates_with_len(model, prompt, n, temperature, seed, DEFAULT_SAMPLE_TOKENS)
}

pub fn sample_candidates_with_len(
    model: &DualHeadModel,
    prompt: &str,
    n: usize,
    temperature: f64,
    seed: u64,
    max_new_tokens: usize,
) -> Result<Vec<String>, EvalError> {
    if n < 2 {
        return Err(EvalError::Contract(format!(
            "best-of-N needs at least 2 candidates, got {n}"
        )));
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(EvalError::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let vocab = *model.vocab();
    let cfg = model.config();
    let mut context = vec![vocab.bos];
    context.extend(vocab.encode(prompt));
    context.push(vocab.sep);
    // leave room for the generated tokens
    let budget = cfg.max_seq_len.saturating_sub(max_new_tokens.max(1));
    if context.len() > budget {
        context.drain(1..1 + (context.len() - budget));
    }

    let mut rng = Rng::new(derive_seed(seed, 0x73616d70)); // "samp"
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens = context.clone();
        for _ in 0..max_new_tokens {
            let pair = probe_pair(&tokens);
            let logits = model.policy_logits_values(&pair)?;
            let v = cfg.vocab_size;
            let last = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
            // byte tokens only; specials are never emitted
            let max = last[..256].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = last[..256]
                .iter()
                .map(|&l| ((l - max) / temperature).exp())
                .collect();
            tokens.push(rng.categorical(&weights));
        }
        out.push(vocab.decode(&tokens[context.len()..]));
    }
    Ok(out)
}

/// Wrap raw tokens for a forward pass; the span fields are placeholders as
/// only logits are read.
fn probe_pair(tokens: &[usize]) -> EncodedPair {
    EncodedPair {
        prompt_len: tokens.len().saturating_sub(2),
        response_span: (tokens.len().saturating_sub(1), tokens.len()),
        attn_len: tokens.len(),
        tokens: tokens.to_vec(),
    }
}
