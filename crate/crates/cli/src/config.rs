//! Run configuration resolution. Precedence: command-line flags beat the
//! HAFRM_SEED environment variable, which beats the JSON config file, which
//! beats built-in defaults. The fully resolved config is written into the
//! run directory so every run can be replayed exactly.

use crate::errors::CliError;
use hafrm_core::fingerprint::fingerprint_hex;
use hafrm_core::model::ModelConfig;
use hafrm_core::train::{TrainConfig, TrainGraph};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SEED_ENV: &str = "HAFRM_SEED";

/// Flat flag set shared by train and sweep.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct CommonFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub eval_every_frac: Option<f64>,
    #[arg(long)]
    pub patience: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
}

#[derive(Deserialize, Default)]
struct ModelOverrides {
    d_model: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    max_seq_len: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
struct HybridOverrides {
    alpha: Option<f64>,
    tau: Option<f64>,
}

#[derive(Deserialize, Default)]
struct TrainOverrides {
    lr: Option<f64>,
    batch_size: Option<usize>,
    max_steps: Option<u64>,
    eval_every_frac: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_eps: Option<f64>,
    weight_decay: Option<f64>,
    max_grad_norm: Option<f64>,
    seed: Option<u64>,
    hybrid: Option<HybridOverrides>,
    early_stop_patience: Option<u64>,
}

/// Shape of a config file: any subset of the resolved config.
#[derive(Deserialize, Default)]
struct FileOverrides {
    model: Option<ModelOverrides>,
    train: Option<TrainOverrides>,
    data: Option<String>,
    test_frac: Option<f64>,
    val_frac: Option<f64>,
}

/// Fully resolved run parameters, serialized as `config.json`.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: String,
    pub test_frac: f64,
    pub val_frac: f64,
    pub mode: String,
    pub config_hash: String,
    /// Fingerprint of the data file's bytes at run time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_fingerprint: Option<String>,
}

pub fn resolve(flags: &CommonFlags) -> Result<RunConfig, CliError> {
    let mut model = ModelConfig::desk_default();
    let mut train = TrainConfig::default();
    let mut data: Option<String> = None;
    let mut test_frac = 0.1;
    let mut val_frac = 0.05;

    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileOverrides = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("bad config {}: {e}", path.display())))?;
        if let Some(m) = file.model {
            set(&mut model.d_model, m.d_model);
            set(&mut model.n_layers, m.n_layers);
            set(&mut model.n_heads, m.n_heads);
            set(&mut model.max_seq_len, m.max_seq_len);
            set(&mut model.seed, m.seed);
        }
        if let Some(t) = file.train {
            set(&mut train.lr, t.lr);
            set(&mut train.batch_size, t.batch_size);
            set(&mut train.max_steps, t.max_steps);
            set(&mut train.eval_every_frac, t.eval_every_frac);
            set(&mut train.adam_beta1, t.adam_beta1);
            set(&mut train.adam_beta2, t.adam_beta2);
            set(&mut train.adam_eps, t.adam_eps);
            set(&mut train.weight_decay, t.weight_decay);
            set(&mut train.max_grad_norm, t.max_grad_norm);
            set(&mut train.seed, t.seed);
            set(&mut train.early_stop_patience, t.early_stop_patience);
            if let Some(h) = t.hybrid {
                set(&mut train.hybrid.alpha, h.alpha);
                set(&mut train.hybrid.tau, h.tau);
            }
        }
        if file.data.is_some() {
            data = file.data;
        }
        set(&mut test_frac, file.test_frac);
        set(&mut val_frac, file.val_frac);
    }

    if let Ok(env_seed) = std::env::var(SEED_ENV) {
        let parsed: u64 = env_seed
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got '{env_seed}'")))?;
        train.seed = parsed;
        model.seed = parsed;
    }

    set(&mut model.d_model, flags.d_model);
    set(&mut model.n_layers, flags.n_layers);
    set(&mut model.n_heads, flags.n_heads);
    set(&mut model.max_seq_len, flags.max_seq_len);
    set(&mut train.lr, flags.lr);
    set(&mut train.batch_size, flags.batch_size);
    set(&mut train.max_steps, flags.max_steps);
    set(&mut train.eval_every_frac, flags.eval_every_frac);
    set(&mut train.early_stop_patience, flags.patience);
    set(&mut train.hybrid.alpha, flags.alpha);
    set(&mut train.hybrid.tau, flags.tau);
    set(&mut test_frac, flags.test_frac);
    set(&mut val_frac, flags.val_frac);
    if let Some(seed) = flags.seed {
        train.seed = seed;
        model.seed = seed;
    }
    if let Some(path) = &flags.data {
        data = Some(path.display().to_string());
    }

    let data = data.ok_or_else(|| CliError::config("no data file given (--data or config)"))?;
    model
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    train
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    train.graph = TrainGraph::Auto;

    let config_hash = train.config_hash(&model);
    Ok(RunConfig {
        mode: train.mode_name().to_string(),
        model,
        train,
        data,
        test_frac,
        val_frac,
        config_hash,
        data_fingerprint: None,
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunConfig {
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

/// Fingerprint of a data file's bytes, recorded next to the config so runs
/// can be tied to their exact inputs.
pub fn data_fingerprint(path: impl AsRef<Path>) -> Result<String, CliError> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.as_ref().display())))?;
    Ok(fingerprint_hex(&bytes))
}
