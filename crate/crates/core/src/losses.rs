//! Training objectives.
//!
//! Reward loss: mean over pairs of `-log sigmoid(r_w - r_l)`, the
//! Bradley-Terry cross entropy on the predicted winning probability.
//! Policy loss: DPO, mean over pairs of `-log sigmoid(tau * (pd_win -
//! pd_lose))`, where pd is the policy/reference log-ratio of the response
//! and tau is 0.1 by default. Hybrid objective: reward loss plus `alpha`
//! times the policy loss, differentiated through one shared graph so the
//! backbone receives gradients from both heads.

use crate::model::{BoundModel, EncodedPair, ModelError};
use crate::tensor::{Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss requires a non-empty batch")]
    EmptyBatch,
    #[error("per-pair inputs disagree in length: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("non-finite input to loss: {0}")]
    NonFinite(String),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights of the hybrid objective. `alpha` balances the policy loss
/// against the reward loss (0.2 by default), `tau` scales the log-ratio
/// difference inside the DPO sigmoid (0.1 by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            alpha: 0.2,
            tau: 0.1,
        }
    }
}

impl HybridConfig {
    /// Standard validation: finite nonnegative alpha, positive tau.
    pub fn validate(&self) -> Result<(), LossError> {
        self.validate_allow_negative()?;
        if self.alpha < 0.0 {
            return Err(LossError::Config(format!(
                "alpha must be >= 0 (got {}); negative ratios are an opt-in experiment",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Relaxed validation for the negative-ratio sweep experiment.
    pub fn validate_allow_negative(&self) -> Result<(), LossError> {
        if !self.alpha.is_finite() {
            return Err(LossError::Config(format!(
                "alpha must be finite, got {}",
                self.alpha
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(LossError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Per-batch training telemetry, serialized one JSON object per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_p: f64,
    pub l_h: f64,
    /// Mean reward gap `r(x, y) - r(x, y')` over the batch.
    pub margin: f64,
    pub pd_win_mean: f64,
    pub pd_lose_mean: f64,
}

/// Whether the batch graph carries the policy branch. `RewardOnly` is the
/// baseline trainer: the policy head is never touched, not even with a zero
/// weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphMode {
    RewardOnly,
    Hybrid,
}

/// Mean over pairs of `-log sigmoid(r_w - r_l)`.
pub fn reward_loss(tape: &mut Tape, r_w: &[Var], r_l: &[Var]) -> Result<Var, LossError> {
    if r_w.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if r_w.len() != r_l.len() {
        return Err(LossError::LengthMismatch {
            lhs: r_w.len(),
            rhs: r_l.len(),
        });
    }
    let wins = tape.stack(r_w)?;
    let loses = tape.stack(r_l)?;
    let margins = tape.sub(wins, loses)?;
    neg_log_sigmoid_mean(tape, margins)
}

/// DPO terms kept accessible for telemetry.
#[derive(Debug)]
pub struct DpoTerms {
    pub loss: Var,
    /// `[n]` log-ratio of the preferred responses.
    pub pd_win: Var,
    /// `[n]` log-ratio of the dispreferred responses.
    pub pd_lose: Var,
}

/// Mean over pairs of `-log sigmoid(tau * (pd_win - pd_lose))` with
/// `pd = log-prob under the policy - log-prob under the frozen reference`.
/// Reference log-probs enter as constants; no gradient reaches them.
pub fn policy_loss_dpo(
    tape: &mut Tape,
    logp_w: &[Var],
    logp_l: &[Var],
    ref_logp_w: &[f64],
    ref_logp_l: &[f64],
    tau: f64,
) -> Result<DpoTerms, LossError> {
    if logp_w.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = logp_w.len();
    for len in [logp_l.len(), ref_logp_w.len(), ref_logp_l.len()] {
        if len != n {
            return Err(LossError::LengthMismatch { lhs: n, rhs: len });
        }
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(LossError::Config(format!("tau must be positive, got {tau}")));
    }
    for (vals, what) in [
        (ref_logp_w, "reference preferred"),
        (ref_logp_l, "reference dispreferred"),
    ] {
        if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(format!("{what} log-prob {bad}")));
        }
    }
    for (vars, what) in [(logp_w, "policy preferred"), (logp_l, "policy dispreferred")] {
        for &v in vars {
            let val = tape.value(v).item()?;
            if !val.is_finite() {
                return Err(LossError::NonFinite(format!("{what} log-prob {val}")));
            }
        }
    }

    let policy_w = tape.stack(logp_w)?;
    let policy_l = tape.stack(logp_l)?;
    let ref_w = tape.constant(vec![n], ref_logp_w.to_vec())?;
    let ref_l = tape.constant(vec![n], ref_logp_l.to_vec())?;
    let pd_win = tape.sub(policy_w, ref_w)?;
    let pd_lose = tape.sub(policy_l, ref_l)?;
    let diff = tape.sub(pd_win, pd_lose)?;
    let scaled = tape.scale(diff, tau)?;
    let loss = neg_log_sigmoid_mean(tape, scaled)?;
    Ok(DpoTerms {
        loss,
        pd_win,
        pd_lose,
    })
}

fn neg_log_sigmoid_mean(tape: &mut Tape, margins: Var) -> Result<Var, LossError> {
    let ls = tape.log_sigmoid(margins)?;
    let mean = tape.mean(ls)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// One (chosen, rejected) pair prepared for the batch graph. Reference
/// log-probs are plain numbers because the reference is frozen.
#[derive(Clone, Debug)]
pub struct PairExample {
    pub id: String,
    pub chosen: EncodedPair,
    pub rejected: EncodedPair,
    pub ref_logp_chosen: f64,
    pub ref_logp_rejected: f64,
}

/// Batch objective plus its telemetry.
pub struct HybridOutput {
    pub objective: Var,
    pub breakdown: LossBreakdown,
}

/// Build the full batch loss graph through a bound model: rewards and
/// sequence log-probs for chosen and rejected responses share one backbone
/// forward per response, and the objective is `l_s + alpha * l_p`.
///
/// With [`GraphMode::RewardOnly`] the policy branch is never constructed and
/// `l_p`, `pd_*` report 0; this is the baseline method.
pub fn hybrid_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &[PairExample],
    cfg: &HybridConfig,
    mode: GraphMode,
) -> Result<HybridOutput, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    cfg.validate_allow_negative()?;

    let mut rewards_w = Vec::with_capacity(batch.len());
    let mut rewards_l = Vec::with_capacity(batch.len());
    let mut logps_w = Vec::with_capacity(batch.len());
    let mut logps_l = Vec::with_capacity(batch.len());
    for item in batch {
        let hidden_c = bound.hidden(tape, &item.chosen)?;
        rewards_w.push(bound.reward_from_hidden(tape, hidden_c, &item.chosen)?);
        if mode == GraphMode::Hybrid {
            logps_w.push(bound.seq_log_prob_from_hidden(tape, hidden_c, &item.chosen)?);
        }
        let hidden_r = bound.hidden(tape, &item.rejected)?;
        rewards_l.push(bound.reward_from_hidden(tape, hidden_r, &item.rejected)?);
        if mode == GraphMode::Hybrid {
            logps_l.push(bound.seq_log_prob_from_hidden(tape, hidden_r, &item.rejected)?);
        }
    }

    let l_s = reward_loss(tape, &rewards_w, &rewards_l)?;
    let margin = {
        let w = tape.stack(&rewards_w)?;
        let l = tape.stack(&rewards_l)?;
        let diff = tape.sub(w, l)?;
        tape.value(diff).data().iter().sum::<f64>() / batch.len() as f64
    };

    match mode {
        GraphMode::RewardOnly => {
            let l_s_val = tape.value(l_s).item()?;
            Ok(HybridOutput {
                objective: l_s,
                breakdown: LossBreakdown {
                    l_s: l_s_val,
                    l_p: 0.0,
                    l_h: l_s_val,
                    margin,
                    pd_win_mean: 0.0,
                    pd_lose_mean: 0.0,
                },
            })
        }
        GraphMode::Hybrid => {
            let ref_w: Vec<f64> = batch.iter().map(|b| b.ref_logp_chosen).collect();
            let ref_l: Vec<f64> = batch.iter().map(|b| b.ref_logp_rejected).collect();
            let dpo = policy_loss_dpo(tape, &logps_w, &logps_l, &ref_w, &ref_l, cfg.tau)?;
            let scaled = tape.scale(dpo.loss, cfg.alpha)?;
            let objective = tape.add(l_s, scaled)?;
            let mean_of = |tape: &Tape, v: Var| -> f64 {
                let d = tape.value(v).data();
                d.iter().sum::<f64>() / d.len() as f64
            };
            Ok(HybridOutput {
                objective,
                breakdown: LossBreakdown {
                    l_s: tape.value(l_s).item()?,
                    l_p: tape.value(dpo.loss).item()?,
                    l_h: tape.value(objective).item()?,
                    margin,
                    pd_win_mean: mean_of(tape, dpo.pd_win),
                    pd_lose_mean: mean_of(tape, dpo.pd_lose),
                },
            })
        }
    }
}
