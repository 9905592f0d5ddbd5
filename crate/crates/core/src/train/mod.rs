//! The optimization loop: AdamW over the hybrid objective with gradient
//! clipping, periodic validation, best-checkpoint selection by validation
//! accuracy, early stopping, and the policy-ratio sweep experiment.
//!
//! All randomness comes from seeds derived from the run seed with a fixed
//! draw order (model init, then one shuffle per epoch), so a run is a pure
//! function of (config, data, seed) and an `alpha = 0` run is bit-identical
//! to the baseline trainer that never builds the policy branch.

mod adamw;
mod checkpoint;

pub use adamw::{adamw_update, adamw_update_block, clip_global_norm, AdamWParams, OptimState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

use crate::data::DatasetSplit;
use crate::eval::{validation_summary, EvalError, ModelScorer};
use crate::fingerprint::fingerprint_hex;
use crate::losses::{
    hybrid_loss, GraphMode, HybridConfig, LossBreakdown, LossError, PairExample,
};
use crate::model::{DualHeadModel, EncodedPair, ModelConfig, ModelError, ReferenceModel};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; offending batch ids: {batch_ids:?}")]
    NonFiniteLoss { step: u64, batch_ids: Vec<String> },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format '{found}' not supported (expected '{expected}')")]
    CheckpointFormat { found: String, expected: String },
    #[error("malformed checkpoint: {0}")]
    CheckpointMalformed(String),
    #[error("failed to encode record '{id}': {source}")]
    Encode { id: String, source: ModelError },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which loss graph the trainer builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrainGraph {
    /// Baseline graph when `alpha == 0`, hybrid graph otherwise.
    #[default]
    Auto,
    /// Build the hybrid graph even at `alpha == 0`. Exists so the
    /// equivalence between the two code paths stays testable.
    ForceHybrid,
}

/// Full training configuration. Defaults are the desk-scale setup; the
/// optimizer block (AdamW, betas 0.9/0.999, eps 1e-5, weight decay 0,
/// gradient norm 1.0, batch 16, seed 0) follows the reference defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Validation cadence as a fraction of `max_steps`.
    pub eval_every_frac: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub hybrid: HybridConfig,
    /// Evaluations without improvement before stopping.
    pub early_stop_patience: u64,
    #[serde(default)]
    pub graph: TrainGraph,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            max_steps: 2000,
            eval_every_frac: 0.025,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-5,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            seed: 0,
            hybrid: HybridConfig::default(),
            early_stop_patience: 10,
            graph: TrainGraph::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.eval_every_frac > 0.0 && self.eval_every_frac <= 1.0) {
            return Err(TrainError::Config(format!(
                "eval_every_frac must lie in (0, 1], got {}",
                self.eval_every_frac
            )));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(TrainError::Config(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::Config("early_stop_patience must be at least 1".into()));
        }
        self.hybrid
            .validate_allow_negative()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Steps between validations: `ceil(eval_every_frac * max_steps)`,
    /// at least 1.
    pub fn eval_every(&self) -> u64 {
        ((self.eval_every_frac * self.max_steps as f64).ceil() as u64).max(1)
    }

    pub fn resolved_graph(&self) -> GraphMode {
        match self.graph {
            TrainGraph::ForceHybrid => GraphMode::Hybrid,
            TrainGraph::Auto if self.hybrid.alpha == 0.0 => GraphMode::RewardOnly,
            TrainGraph::Auto => GraphMode::Hybrid,
        }
    }

    /// "baseline" when the policy branch is skipped, "hybrid" otherwise.
    pub fn mode_name(&self) -> &'static str {
        match self.resolved_graph() {
            GraphMode::RewardOnly => "baseline",
            GraphMode::Hybrid => "hybrid",
        }
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Content hash over the model and train configs; stored in checkpoints
    /// and logs so a run can be tied to its exact configuration.
    pub fn config_hash(&self, model_cfg: &ModelConfig) -> String {
        let blob = format!(
            "{}\n{}",
            serde_json::to_string(model_cfg).expect("config serializes"),
            serde_json::to_string(self).expect("config serializes"),
        );
        fingerprint_hex(blob.as_bytes())
    }
}

/// A record encoded once for the whole run.
#[derive(Clone, Debug)]
pub struct EncodedExample {
    pub id: String,
    pub chosen: EncodedPair,
    pub rejected: EncodedPair,
}

pub fn encode_records(
    model: &DualHeadModel,
    records: &[crate::data::PreferenceRecord],
) -> Result<Vec<EncodedExample>, TrainError> {
    records
        .iter()
        .map(|r| {
            let enc = |resp: &str| {
                model.encode_pair(&r.prompt, resp).map_err(|source| TrainError::Encode {
                    id: r.id.clone(),
                    source,
                })
            };
            Ok(EncodedExample {
                id: r.id.clone(),
                chosen: enc(&r.chosen)?,
                rejected: enc(&r.rejected)?,
            })
        })
        .collect()
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm_pre_clip: f64,
    /// Global gradient norm actually applied.
    pub grad_norm: f64,
}

/// Owns the model, the frozen reference and the optimizer state. Reference
/// log-probs are cached per record id; the reference never changes, so the
/// cache never invalidates.
pub struct Trainer {
    model: DualHeadModel,
    reference: ReferenceModel,
    hybrid: HybridConfig,
    graph: GraphMode,
    adamw: AdamWParams,
    max_grad_norm: f64,
    optim: OptimState,
    ref_cache: HashMap<String, (f64, f64)>,
    steps_done: u64,
}

impl Trainer {
    /// Snapshots the reference immediately, before any step runs.
    pub fn new(model: DualHeadModel, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let reference = model.snapshot_reference();
        let optim = OptimState::new(&model);
        Ok(Trainer {
            reference,
            optim,
            hybrid: cfg.hybrid,
            graph: cfg.resolved_graph(),
            adamw: cfg.adamw(),
            max_grad_norm: cfg.max_grad_norm,
            model,
            ref_cache: HashMap::new(),
            steps_done: 0,
        })
    }

    pub fn model(&self) -> &DualHeadModel {
        &self.model
    }

    pub fn reference(&self) -> &ReferenceModel {
        &self.reference
    }

    pub fn optim(&self) -> &OptimState {
        &self.optim
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn into_model(self) -> DualHeadModel {
        self.model
    }

    fn ref_logps(&mut self, example: &EncodedExample) -> Result<(f64, f64), TrainError> {
        if let Some(&cached) = self.ref_cache.get(&example.id) {
            return Ok(cached);
        }
        let value = (
            self.reference.sequence_log_prob(&example.chosen)?,
            self.reference.sequence_log_prob(&example.rejected)?,
        );
        self.ref_cache.insert(example.id.clone(), value);
        Ok(value)
    }

    /// One forward/backward of the objective, clip, AdamW update.
    pub fn train_step(&mut self, batch: &[EncodedExample]) -> Result<StepOutcome, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Loss(LossError::EmptyBatch));
        }
        let mut examples = Vec::with_capacity(batch.len());
        for ex in batch {
            let (ref_c, ref_r) = if self.graph == GraphMode::Hybrid {
                self.ref_logps(ex)?
            } else {
                (0.0, 0.0)
            };
            examples.push(PairExample {
                id: ex.id.clone(),
                chosen: ex.chosen.clone(),
                rejected: ex.rejected.clone(),
                ref_logp_chosen: ref_c,
                ref_logp_rejected: ref_r,
            });
        }

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let nonfinite_abort = || TrainError::NonFiniteLoss {
            step: self.steps_done + 1,
            batch_ids: batch.iter().map(|e| e.id.clone()).collect(),
        };
        let out = match hybrid_loss(&mut tape, &bound, &examples, &self.hybrid, self.graph) {
            Ok(out) => out,
            Err(e) if loss_error_is_nonfinite(&e) => return Err(nonfinite_abort()),
            Err(e) => return Err(e.into()),
        };
        let b = out.breakdown;
        if !(b.l_h.is_finite() && b.l_s.is_finite() && b.l_p.is_finite()) {
            return Err(nonfinite_abort());
        }
        tape.backward(out.objective).map_err(LossError::from)?;

        let mut grads: Vec<Vec<f64>> = bound
            .param_vars()
            .iter()
            .map(|&v| tape.grad_or_zeros(v))
            .collect();
        drop(tape);
        let pre_clip = clip_global_norm(&mut grads, self.max_grad_norm);
        let grad_norm = if pre_clip > self.max_grad_norm {
            grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| v * v)
                .sum::<f64>()
                .sqrt()
        } else {
            pre_clip
        };
        adamw_update(&mut self.model, &grads, &mut self.optim, &self.adamw);
        self.steps_done += 1;
        Ok(StepOutcome {
            breakdown: b,
            grad_norm_pre_clip: pre_clip,
            grad_norm,
        })
    }
}

/// Whether an error bottoms out in a non-finite value, in which case the
/// step aborts with the offending batch ids instead of a bare numeric
/// error.
fn loss_error_is_nonfinite(e: &LossError) -> bool {
    use crate::tensor::TensorError;
    matches!(
        e,
        LossError::NonFinite(_)
            | LossError::Tensor(TensorError::NonFinite { .. })
            | LossError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// One per-step log line: the loss breakdown keyed by step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEvent {
    pub step: u64,
    pub validation_accuracy: f64,
    /// Mean reward gap on the validation set.
    pub mean_margin: f64,
    /// Mean reward over both responses; logged alongside accuracy because
    /// the selection metric is reported both ways.
    pub mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEvent {
    Validation(ValidationEvent),
    Step(StepEvent),
}

/// Ordered training telemetry. Steps strictly increase within each event
/// kind; serialization is line-oriented JSON with a header line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: String,
    pub config_hash: String,
    pub events: Vec<LogEvent>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = format!(
            "{}\n",
            serde_json::json!({"mode": self.mode, "config_hash": self.config_hash})
        );
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("log event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn validations(&self) -> impl Iterator<Item = &ValidationEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Validation(v) => Some(v),
            _ => None,
        })
    }
}

/// Notifications emitted while fitting, for streaming logs and checkpoint
/// writes.
pub enum FitEvent<'a> {
    Step(&'a StepEvent),
    Validated(&'a ValidationEvent),
    Improved {
        step: u64,
        accuracy: f64,
        checkpoint: &'a Checkpoint,
    },
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub log: TrainLog,
}

pub fn fit(
    model: DualHeadModel,
    data: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<FitOutcome, TrainError> {
    fit_with(model, data, cfg, |_| {})
}

/// Seeded-shuffle epochs up to `max_steps`; validation pairwise accuracy
/// every `eval_every` steps (and once before any step); the checkpoint with
/// the highest accuracy wins, earliest step on ties; stops after
/// `early_stop_patience` evaluations without improvement.
pub fn fit_with(
    model: DualHeadModel,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&FitEvent),
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if data.validation.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }
    let config_hash = cfg.config_hash(model.config());
    let encoded = encode_records(&model, &data.train)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut events: Vec<LogEvent> = Vec::new();

    let validate = |m: &DualHeadModel, step: u64| -> Result<ValidationEvent, TrainError> {
        let scorer = ModelScorer { model: m };
        let (report, reward) = validation_summary(&scorer, "validation", &data.validation)?;
        Ok(ValidationEvent {
            step,
            validation_accuracy: report.accuracy,
            mean_margin: report.mean_margin,
            mean_reward: reward,
        })
    };

    let snapshot = |trainer: &Trainer, val: &ValidationEvent| Checkpoint {
        model: trainer.model().clone(),
        optim: Some(trainer.optim().clone()),
        step: val.step,
        validation_accuracy: val.validation_accuracy,
        config_hash: config_hash.clone(),
    };

    let initial = validate(trainer.model(), 0)?;
    observer(&FitEvent::Validated(&initial));
    let mut best = snapshot(&trainer, &initial);
    let mut best_accuracy = initial.validation_accuracy;
    events.push(LogEvent::Validation(initial));

    let eval_every = cfg.eval_every();
    let mut stale_evals: u64 = 0;
    let mut epoch: u64 = 0;
    'training: while trainer.steps_done() < cfg.max_steps {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut rng = Rng::new(derive_seed(cfg.seed, 0x7368_7566 ^ epoch)); // "shuf"
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedExample> =
                chunk.iter().map(|&i| encoded[i].clone()).collect();
            let outcome = trainer.train_step(&batch)?;
            let step = trainer.steps_done();
            let step_event = StepEvent {
                step,
                loss: outcome.breakdown,
            };
            observer(&FitEvent::Step(&step_event));
            events.push(LogEvent::Step(step_event));

            if step % eval_every == 0 {
                let val = validate(trainer.model(), step)?;
                observer(&FitEvent::Validated(&val));
                if val.validation_accuracy > best_accuracy {
                    best_accuracy = val.validation_accuracy;
                    best = snapshot(&trainer, &val);
                    stale_evals = 0;
                    observer(&FitEvent::Improved {
                        step,
                        accuracy: val.validation_accuracy,
                        checkpoint: &best,
                    });
                } else {
                    stale_evals += 1;
                }
                events.push(LogEvent::Validation(val));
                if stale_evals >= cfg.early_stop_patience {
                    break 'training;
                }
            }
            if trainer.steps_done() >= cfg.max_steps {
                break 'training;
            }
        }
        epoch += 1;
    }

    Ok(FitOutcome {
        best,
        log: TrainLog {
            mode: cfg.mode_name().to_string(),
            config_hash,
            events,
        },
    })
}

/// One arm of the policy-ratio sweep.
pub struct SweepRun {
    pub alpha: f64,
    pub outcome: FitOutcome,
    pub best_step: u64,
    pub best_accuracy: f64,
    /// Validation margin at the best checkpoint's step.
    pub margin_at_best: f64,
}

pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
}

/// Run `fit` once per alpha on identical seed and data. Early stopping is
/// disabled so every arm shares the same step grid and the emitted series
/// stay aligned. `alpha = 0` is the baseline by construction.
pub fn alpha_sweep(
    model_cfg: &ModelConfig,
    data: &DatasetSplit,
    base_cfg: &TrainConfig,
    alphas: &[f64],
) -> Result<SweepOutcome, TrainError> {
    if alphas.is_empty() {
        return Err(TrainError::Config("sweep needs at least one alpha".into()));
    }
    let mut runs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = base_cfg.clone();
        cfg.hybrid.alpha = alpha;
        cfg.early_stop_patience = u64::MAX;
        let model = DualHeadModel::new(model_cfg.clone())?;
        let outcome = fit(model, data, &cfg)?;
        let best_step = outcome.best.step;
        let best_accuracy = outcome.best.validation_accuracy;
        let margin_at_best = outcome
            .log
            .validations()
            .find(|v| v.step == best_step)
            .map(|v| v.mean_margin)
            .unwrap_or(0.0);
        runs.push(SweepRun {
            alpha,
            outcome,
            best_step,
            best_accuracy,
            margin_at_best,
        });
    }
    debug_assert!(aligned_grids(&runs));
    Ok(SweepOutcome { runs })
}

fn aligned_grids(runs: &[SweepRun]) -> bool {
    let grid: Vec<u64> = runs[0].outcome.log.steps().map(|s| s.step).collect();
    runs.iter().all(|r| {
        r.outcome
            .log
            .steps()
            .map(|s| s.step)
            .collect::<Vec<u64>>()
            == grid
    })
}

impl SweepOutcome {
    /// Wide table `step, alpha=a0, alpha=a1, ...` of training margins.
    pub fn margin_vs_step_csv(&self) -> String {
        let mut out = String::from("step");
        for run in &self.runs {
            out.push_str(&format!(",alpha={}", run.alpha));
        }
        out.push('\n');
        let steps: Vec<u64> = self.runs[0].outcome.log.steps().map(|s| s.step).collect();
        let series: Vec<Vec<f64>> = self
            .runs
            .iter()
            .map(|r| r.outcome.log.steps().map(|s| s.loss.margin).collect())
            .collect();
        for (i, step) in steps.iter().enumerate() {
            out.push_str(&step.to_string());
            for s in &series {
                out.push_str(&format!(",{}", s[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Wide table of validation accuracies on the shared evaluation grid.
    pub fn accuracy_vs_step_csv(&self) -> String {
        let mut out = String::from("step");
        for run in &self.runs {
            out.push_str(&format!(",alpha={}", run.alpha));
        }
        out.push('\n');
        let steps: Vec<u64> = self
            .runs[0]
            .outcome
            .log
            .validations()
            .map(|v| v.step)
            .collect();
        let series: Vec<Vec<f64>> = self
            .runs
            .iter()
            .map(|r| {
                r.outcome
                    .log
                    .validations()
                    .map(|v| v.validation_accuracy)
                    .collect()
            })
            .collect();
        for (i, step) in steps.iter().enumerate() {
            out.push_str(&step.to_string());
            for s in &series {
                out.push_str(&format!(",{}", s[i]));
            }
            out.push('\n');
        }
        out
    }
}
