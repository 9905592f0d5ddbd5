//! The dual-head sequence model: a causal pre-norm transformer backbone
//! producing per-token preference vectors, a reward head mapping the final
//! hidden state to a scalar, and a policy head mapping every hidden state to
//! next-token logits. Both heads read the same backbone parameters; a
//! gradient step through either head moves the shared representation.

mod encode;
mod vocab;

pub use encode::{encode_pair, EncodedPair};
pub use vocab::{tokenize, Vocab};

use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("response must be non-empty after tokenization")]
    EmptyResponse,
    #[error("response of {response_tokens} tokens plus BOS/SEP exceeds max_seq_len {max_seq_len}")]
    ResponseTooLong {
        response_tokens: usize,
        max_seq_len: usize,
    },
    #[error("sequence of {len} tokens exceeds max_seq_len {max_seq_len}")]
    SequenceTooLong { len: usize, max_seq_len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters. `seed` drives parameter initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on a CPU in minutes.
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 128,
            vocab_size: Vocab::default().size(),
            seed: 0,
        }
    }

    /// Tiny config for gradient checks and fast tests.
    pub fn tiny(d_model: usize, n_layers: usize, n_heads: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            max_seq_len,
            vocab_size: Vocab::default().size(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `V*d + L*d + n_layers*(12*d^2 + 13*d) + 2*d + (d + 1) + (d*V + V)`
    /// (embedding, positions, blocks, final norm, reward head, policy head).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let l = self.max_seq_len;
        v * d + l * d + self.n_layers * (12 * d * d + 13 * d) + 2 * d + (d + 1) + (d * v + v)
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    w_q: Tensor,
    b_q: Tensor,
    w_k: Tensor,
    b_k: Tensor,
    w_v: Tensor,
    b_v: Tensor,
    w_o: Tensor,
    b_o: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w_fc: Tensor,
    b_fc: Tensor,
    w_proj: Tensor,
    b_proj: Tensor,
}

/// The single trained object: shared backbone plus the two heads.
#[derive(Clone, Debug)]
pub struct DualHeadModel {
    cfg: ModelConfig,
    vocab: Vocab,
    embedding: Tensor,
    pos: Tensor,
    blocks: Vec<BlockParams>,
    final_gain: Tensor,
    final_bias: Tensor,
    /// Reward head F: `[d_model x 1]` weight, zero-initialized so the
    /// initial reward is exactly 0 and the initial pairwise loss is ln 2.
    reward_w: Tensor,
    reward_b: Tensor,
    /// Policy head K: `[d_model x vocab]`.
    policy_w: Tensor,
    policy_b: Tensor,
}

impl DualHeadModel {
    /// Initialize from config: weights N(0, 0.02), biases zero, layer-norm
    /// gains one, reward head fully zero. Draw order is fixed (embedding,
    /// positions, per-block q/k/v/o/fc/proj, policy head) so initialization
    /// is a pure function of the seed.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let vocab = Vocab::default();
        let mut rng = Rng::new(derive_seed(cfg.seed, 0x696e_6974)); // "init"
        let d = cfg.d_model;
        let v = cfg.vocab_size;

        let embedding = Tensor::randn(vec![v, d], INIT_STD, &mut rng).with_grad();
        let pos = Tensor::randn(vec![cfg.max_seq_len, d], INIT_STD, &mut rng).with_grad();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(vec![d]).with_grad(),
                w_q: Tensor::randn(vec![d, d], INIT_STD, &mut rng).with_grad(),
                b_q: Tensor::zeros(vec![d]).with_grad(),
                w_k: Tensor::randn(vec![d, d], INIT_STD, &mut rng).with_grad(),
                b_k: Tensor::zeros(vec![d]).with_grad(),
                w_v: Tensor::randn(vec![d, d], INIT_STD, &mut rng).with_grad(),
                b_v: Tensor::zeros(vec![d]).with_grad(),
                w_o: Tensor::randn(vec![d, d], INIT_STD, &mut rng).with_grad(),
                b_o: Tensor::zeros(vec![d]).with_grad(),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(vec![d]).with_grad(),
                w_fc: Tensor::randn(vec![d, 4 * d], INIT_STD, &mut rng).with_grad(),
                b_fc: Tensor::zeros(vec![4 * d]).with_grad(),
                w_proj: Tensor::randn(vec![4 * d, d], INIT_STD, &mut rng).with_grad(),
                b_proj: Tensor::zeros(vec![d]).with_grad(),
            })
            .collect();
        let final_gain = ones(d);
        let final_bias = Tensor::zeros(vec![d]).with_grad();
        let reward_w = Tensor::zeros(vec![d, 1]).with_grad();
        let reward_b = Tensor::zeros(vec![1]).with_grad();
        let policy_w = Tensor::randn(vec![d, v], INIT_STD, &mut rng).with_grad();
        let policy_b = Tensor::zeros(vec![v]).with_grad();

        Ok(DualHeadModel {
            cfg,
            vocab,
            embedding,
            pos,
            blocks,
            final_gain,
            final_bias,
            reward_w,
            reward_b,
            policy_w,
            policy_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encode_pair(&self, prompt: &str, response: &str) -> Result<EncodedPair, ModelError> {
        encode_pair(prompt, response, &self.vocab, &self.cfg)
    }

    /// Named parameters in canonical order. The order is part of the
    /// checkpoint and optimizer-state contract.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w_q", &b.w_q),
                ("b_q", &b.b_q),
                ("w_k", &b.w_k),
                ("b_k", &b.b_k),
                ("w_v", &b.w_v),
                ("b_v", &b.b_v),
                ("w_o", &b.w_o),
                ("b_o", &b.b_o),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w_fc", &b.w_fc),
                ("b_fc", &b.b_fc),
                ("w_proj", &b.w_proj),
                ("b_proj", &b.b_proj),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("reward_w".into(), &self.reward_w));
        out.push(("reward_b".into(), &self.reward_b));
        out.push(("policy_w".into(), &self.policy_w));
        out.push(("policy_b".into(), &self.policy_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_gain", &mut b.ln1_gain),
                ("ln1_bias", &mut b.ln1_bias),
                ("w_q", &mut b.w_q),
                ("b_q", &mut b.b_q),
                ("w_k", &mut b.w_k),
                ("b_k", &mut b.b_k),
                ("w_v", &mut b.w_v),
                ("b_v", &mut b.b_v),
                ("w_o", &mut b.w_o),
                ("b_o", &mut b.b_o),
                ("ln2_gain", &mut b.ln2_gain),
                ("ln2_bias", &mut b.ln2_bias),
                ("w_fc", &mut b.w_fc),
                ("b_fc", &mut b.b_fc),
                ("w_proj", &mut b.w_proj),
                ("b_proj", &mut b.b_proj),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("final_bias".into(), &mut self.final_bias));
        out.push(("reward_w".into(), &mut self.reward_w));
        out.push(("reward_b".into(), &mut self.reward_b));
        out.push(("policy_w".into(), &mut self.policy_w));
        out.push(("policy_b".into(), &mut self.policy_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameters flattened in canonical order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector in canonical order.
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::Config(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.named_params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Register every parameter on a tape. `trainable` controls whether
    /// gradients flow; evaluation binds non-trainable.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> BoundModel<'m> {
        let reg = |tape: &mut Tape, t: &Tensor| -> Var {
            if trainable {
                tape.param(t)
            } else {
                tape.input(t)
            }
        };
        BoundModel {
            cfg: &self.cfg,
            embedding: reg(tape, &self.embedding),
            pos: reg(tape, &self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1_gain: reg(tape, &b.ln1_gain),
                    ln1_bias: reg(tape, &b.ln1_bias),
                    w_q: reg(tape, &b.w_q),
                    b_q: reg(tape, &b.b_q),
                    w_k: reg(tape, &b.w_k),
                    b_k: reg(tape, &b.b_k),
                    w_v: reg(tape, &b.w_v),
                    b_v: reg(tape, &b.b_v),
                    w_o: reg(tape, &b.w_o),
                    b_o: reg(tape, &b.b_o),
                    ln2_gain: reg(tape, &b.ln2_gain),
                    ln2_bias: reg(tape, &b.ln2_bias),
                    w_fc: reg(tape, &b.w_fc),
                    b_fc: reg(tape, &b.b_fc),
                    w_proj: reg(tape, &b.w_proj),
                    b_proj: reg(tape, &b.b_proj),
                })
                .collect(),
            final_gain: reg(tape, &self.final_gain),
            final_bias: reg(tape, &self.final_bias),
            reward_w: reg(tape, &self.reward_w),
            reward_b: reg(tape, &self.reward_b),
            policy_w: reg(tape, &self.policy_w),
            policy_b: reg(tape, &self.policy_b),
        }
    }

    // ---- value-level entry points (fresh private tape, no gradients) ----

    /// Per-token hidden states `[T x d_model]` under the causal mask.
    pub fn forward_hidden_values(&self, pair: &EncodedPair) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = bound.hidden(&mut tape, pair)?;
        Ok(tape.value(h).clone())
    }

    /// Scalar reward: reward head applied to the hidden state of the last
    /// non-PAD token.
    pub fn reward_of(&self, pair: &EncodedPair) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = bound.hidden(&mut tape, pair)?;
        let r = bound.reward_from_hidden(&mut tape, h, pair)?;
        Ok(tape.value(r).item()?)
    }

    /// Next-token logits `[T x vocab_size]`.
    pub fn policy_logits_values(&self, pair: &EncodedPair) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = bound.policy_logits(&mut tape, pair)?;
        Ok(tape.value(logits).clone())
    }

    /// Sum of response-token log probabilities under the policy head.
    pub fn sequence_log_prob(&self, pair: &EncodedPair) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = bound.hidden(&mut tape, pair)?;
        let lp = bound.seq_log_prob_from_hidden(&mut tape, h, pair)?;
        Ok(tape.value(lp).item()?)
    }

    /// Deep copy of all parameters, frozen as the DPO reference policy.
    pub fn snapshot_reference(&self) -> ReferenceModel {
        ReferenceModel {
            model: self.clone(),
        }
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::from_vec(vec![d], vec![1.0; d])
        .expect("ones tensor")
        .with_grad()
}

struct BoundBlock {
    ln1_gain: Var,
    ln1_bias: Var,
    w_q: Var,
    b_q: Var,
    w_k: Var,
    b_k: Var,
    w_v: Var,
    b_v: Var,
    w_o: Var,
    b_o: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_fc: Var,
    b_fc: Var,
    w_proj: Var,
    b_proj: Var,
}

/// A model whose parameters are registered on one tape. All forward methods
/// append ops to that tape; several sequences can share one binding, which
/// is how a whole batch ends up in a single graph.
pub struct BoundModel<'m> {
    cfg: &'m ModelConfig,
    embedding: Var,
    pos: Var,
    blocks: Vec<BoundBlock>,
    final_gain: Var,
    final_bias: Var,
    reward_w: Var,
    reward_b: Var,
    policy_w: Var,
    policy_b: Var,
}

impl BoundModel<'_> {
    /// Backbone forward pass: `[T x d_model]` hidden states.
    pub fn hidden(&self, tape: &mut Tape, pair: &EncodedPair) -> Result<Var, ModelError> {
        let t = pair.tokens.len();
        if t > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max_seq_len: self.cfg.max_seq_len,
            });
        }
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let d_head = d / n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();

        let tok = tape.embedding(self.embedding, &pair.tokens)?;
        let pos = tape.slice_rows(self.pos, 0, t)?;
        let mut x = tape.add(tok, pos)?;

        for b in &self.blocks {
            let normed = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
            let q = self.linear(tape, normed, b.w_q, b.b_q)?;
            let k = self.linear(tape, normed, b.w_k, b.b_k)?;
            let v = self.linear(tape, normed, b.w_v, b.b_v)?;

            let mut head_ctx = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let qh = tape.slice_cols(q, h * d_head, d_head)?;
                let kh = tape.slice_cols(k, h * d_head, d_head)?;
                let vh = tape.slice_cols(v, h * d_head, d_head)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale)?;
                let masked = tape.causal_mask(scaled)?;
                let probs = tape.softmax_rows(masked)?;
                head_ctx.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&head_ctx)?;
            let attn = self.linear(tape, ctx, b.w_o, b.b_o)?;
            x = tape.add(x, attn)?;

            let normed2 = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
            let fc = self.linear(tape, normed2, b.w_fc, b.b_fc)?;
            let act = tape.gelu(fc)?;
            let proj = self.linear(tape, act, b.w_proj, b.b_proj)?;
            x = tape.add(x, proj)?;
        }
        Ok(tape.layer_norm(x, self.final_gain, self.final_bias, LN_EPS)?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
        let xw = tape.matmul(x, w)?;
        Ok(tape.add_bias(xw, b)?)
    }

    /// Reward readout: head applied to the last non-PAD position.
    pub fn reward_from_hidden(
        &self,
        tape: &mut Tape,
        hidden: Var,
        pair: &EncodedPair,
    ) -> Result<Var, ModelError> {
        let last = tape.select_row(hidden, pair.attn_len - 1)?;
        self.linear(tape, last, self.reward_w, self.reward_b)
    }

    pub fn reward(&self, tape: &mut Tape, pair: &EncodedPair) -> Result<Var, ModelError> {
        let h = self.hidden(tape, pair)?;
        self.reward_from_hidden(tape, h, pair)
    }

    /// Full `[T x vocab]` next-token logits.
    pub fn policy_logits(&self, tape: &mut Tape, pair: &EncodedPair) -> Result<Var, ModelError> {
        let h = self.hidden(tape, pair)?;
        self.linear(tape, h, self.policy_w, self.policy_b)
    }

    /// Sum over response positions of the teacher-forced log probability.
    /// Only the rows predicting response tokens go through the policy head.
    pub fn seq_log_prob_from_hidden(
        &self,
        tape: &mut Tape,
        hidden: Var,
        pair: &EncodedPair,
    ) -> Result<Var, ModelError> {
        let (start, end) = pair.response_span;
        debug_assert!(start > 0 && end > start);
        let len = end - start;
        // hidden rows start-1 .. end-1 predict tokens start .. end
        let rows = tape.slice_rows(hidden, start - 1, len)?;
        let logits = self.linear(tape, rows, self.policy_w, self.policy_b)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        let picks: Vec<(usize, usize)> = (0..len).map(|i| (i, pair.tokens[start + i])).collect();
        let picked = tape.gather(log_probs, &picks)?;
        Ok(tape.sum(picked)?)
    }

    pub fn seq_log_prob(&self, tape: &mut Tape, pair: &EncodedPair) -> Result<Var, ModelError> {
        let h = self.hidden(tape, pair)?;
        self.seq_log_prob_from_hidden(tape, h, pair)
    }

    /// Parameter vars in the canonical order of
    /// [`DualHeadModel::named_params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding, self.pos];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.w_q, b.b_q, b.w_k, b.b_k, b.w_v, b.b_v, b.w_o, b.b_o,
                b.ln2_gain, b.ln2_bias, b.w_fc, b.b_fc, b.w_proj, b.b_proj,
            ]);
        }
        out.extend([
            self.final_gain,
            self.final_bias,
            self.reward_w,
            self.reward_b,
            self.policy_w,
            self.policy_b,
        ]);
        out
    }
}

/// Frozen deep copy of a model, used as the DPO reference policy. The inner
/// model is private so nothing can train it; its outputs never change.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    model: DualHeadModel,
}

impl ReferenceModel {
    pub fn sequence_log_prob(&self, pair: &EncodedPair) -> Result<f64, ModelError> {
        self.model.sequence_log_prob(pair)
    }

    pub fn reward_of(&self, pair: &EncodedPair) -> Result<f64, ModelError> {
        self.model.reward_of(pair)
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Read access for checkpointing; there is no mutable counterpart.
    pub fn model(&self) -> &DualHeadModel {
        &self.model
    }

    /// Rebuild from a deserialized model (checkpoint loading).
    pub fn from_frozen(model: DualHeadModel) -> Self {
        ReferenceModel { model }
    }
}
