//! Versioned checkpoint files: JSON with a format tag, the model config,
//! every parameter array by name, the optimizer state, the step and the
//! validation metric. f64 values survive the JSON round trip exactly
//! (shortest-representation printing), so a reloaded model reproduces
//! forward outputs bit for bit.

use super::{OptimState, TrainError};
use crate::model::{DualHeadModel, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "hafrm-ckpt-v1";

/// Serialized model + optimizer + selection metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualHeadModel,
    pub optim: Option<OptimState>,
    pub step: u64,
    pub validation_accuracy: f64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    step: u64,
    validation_accuracy: f64,
    config_hash: String,
    params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.model.config().clone(),
            step: self.step,
            validation_accuracy: self.validation_accuracy,
            config_hash: self.config_hash.clone(),
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(name, t)| ParamEntry {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            optim: self.optim.clone(),
        };
        let json = serde_json::to_string(&file).expect("checkpoint serializes");
        std::fs::write(path.as_ref(), json).map_err(|source| TrainError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
        let bytes = std::fs::read(path.as_ref()).map_err(|source| TrainError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)
            .map_err(|e| TrainError::CheckpointMalformed(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(TrainError::CheckpointFormat {
                found: file.format,
                expected: CHECKPOINT_FORMAT.to_string(),
            });
        }
        let mut model = DualHeadModel::new(file.config.clone())?;
        let mut entries: std::collections::HashMap<String, ParamEntry> = file
            .params
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        for (name, tensor) in model.named_params_mut() {
            let entry = entries.remove(&name).ok_or_else(|| {
                TrainError::CheckpointMalformed(format!("missing parameter '{name}'"))
            })?;
            if entry.shape != tensor.shape() {
                return Err(TrainError::CheckpointMalformed(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&entry.data);
        }
        if let Some(stray) = entries.keys().next() {
            return Err(TrainError::CheckpointMalformed(format!(
                "unknown parameter '{stray}'"
            )));
        }
        if let Some(optim) = &file.optim {
            if !optim.matches(&model) {
                return Err(TrainError::CheckpointMalformed(
                    "optimizer state does not match model shape".into(),
                ));
            }
        }
        Ok(Checkpoint {
            model,
            optim: file.optim,
            step: file.step,
            validation_accuracy: file.validation_accuracy,
            config_hash: file.config_hash,
        })
    }
}
