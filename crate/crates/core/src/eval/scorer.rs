//! Reward scorers: anything that maps (prompt, response) to a scalar.
//! The trained model is one implementation; ground-truth rules, random
//! baselines and DPO-implicit rewards are others, so every evaluation
//! routine can be exercised against a known oracle.

use super::EvalError;
use crate::data::SynthRule;
use crate::model::{DualHeadModel, ReferenceModel};

pub trait RewardScorer {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, EvalError>;
}

/// Scores with the model's reward head.
pub struct ModelScorer<'a> {
    pub model: &'a DualHeadModel,
}

impl RewardScorer for ModelScorer<'_> {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, EvalError> {
        let pair = self.model.encode_pair(prompt, response)?;
        Ok(self.model.reward_of(&pair)?)
    }
}

/// Ground-truth scorer backed by a synthetic rule. Ignores the prompt, as
/// the rules are pure functions of the response text.
pub struct RuleScorer(pub SynthRule);

impl RewardScorer for RuleScorer {
    fn score(&self, _prompt: &str, response: &str) -> Result<f64, EvalError> {
        Ok(self.0.score(response))
    }
}

/// Seeded uniform noise in [0, 1), a pure function of (seed, prompt,
/// response) so results are order-independent and reproducible.
pub struct UniformRandomScorer {
    pub seed: u64,
}

impl RewardScorer for UniformRandomScorer {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, EvalError> {
        let mut h = crate::fingerprint::Fnv1a::new();
        h.write(&self.seed.to_le_bytes());
        h.write(prompt.as_bytes());
        h.write(&[0xff]);
        h.write(response.as_bytes());
        Ok((h.finish() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
    }
}

/// Adds a constant to an inner scorer; rankings must not care.
pub struct ShiftedScorer<S> {
    pub inner: S,
    pub delta: f64,
}

impl<S: RewardScorer> RewardScorer for ShiftedScorer<S> {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, EvalError> {
        Ok(self.inner.score(prompt, response)? + self.delta)
    }
}

/// Treats a DPO-trained policy as a reward model: the score is
/// `log pi(x, y) - log pi_ref(x, y)`, optionally rescaled by a positive
/// constant (a tau factor changes nothing about rankings).
pub struct ImplicitDpoScorer<'a> {
    pub policy: &'a DualHeadModel,
    pub reference: &'a ReferenceModel,
    pub scale: f64,
}

impl RewardScorer for ImplicitDpoScorer<'_> {
    fn score(&self, prompt: &str, response: &str) -> Result<f64, EvalError> {
        Ok(self.scale * super::implicit_dpo_reward(self.policy, self.reference, prompt, response)?)
    }
}
