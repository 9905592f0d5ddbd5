//! AdamW with bias correction and decoupled weight decay, plus global
//! gradient-norm clipping. Moments are stored per parameter in the model's
//! canonical order.

use crate::model::DualHeadModel;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new(model: &DualHeadModel) -> Self {
        let shapes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
        OptimState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn matches(&self, model: &DualHeadModel) -> bool {
        let params = model.named_params();
        params.len() == self.m.len()
            && params
                .iter()
                .zip(&self.m)
                .all(|((_, t), m)| t.numel() == m.len())
    }
}

/// Global L2 norm over all gradient blocks. Rescales in place only when the
/// norm exceeds `max_norm`, so sub-threshold updates are untouched bit for
/// bit.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// One AdamW update over every model parameter. `grads` must be in the
/// canonical parameter order.
pub fn adamw_update(
    model: &mut DualHeadModel,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    params: &AdamWParams,
) {
    assert!(state.matches(model), "optimizer state does not match model");
    assert_eq!(grads.len(), state.m.len(), "gradient block count mismatch");
    state.step += 1;
    let t = state.step;
    for (((_, tensor), grad), (m, v)) in model
        .named_params_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        adamw_update_block(tensor.data_mut(), grad, m, v, t, params);
    }
}

/// The scalar update rule:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`
/// with `m_hat = m / (1 - b1^t)` and `v_hat = v / (1 - b2^t)`.
pub fn adamw_update_block(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    params: &AdamWParams,
) {
    debug_assert_eq!(p.len(), g.len());
    let bc1 = 1.0 - params.beta1.powi(t as i32);
    let bc2 = 1.0 - params.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * g[i];
        v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= params.lr * (m_hat / (v_hat.sqrt() + params.eps) + params.weight_decay * p[i]);
    }
}
