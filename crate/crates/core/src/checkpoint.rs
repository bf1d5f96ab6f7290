//! Versioned training checkpoints.
//!
//! A checkpoint is a safetensors file. Tensors are stored as `f64`:
//! `model.<name>` for parameters and batch-norm buffers, `optim.m.<name>` and
//! `optim.v.<name>` for the RAdam moments and `lookahead.slow.<name>` for the
//! slow weights. Everything else (format tag, version, model configuration,
//! optimizer scalars, scheduler state, training log) sits in the header
//! metadata as JSON strings.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::AlignmentMode;
use crate::net::{state_shapes, Model, ModelConfig};
use crate::optim::{LookaheadConfig, Moments, Plateau, RAdamConfig};
use crate::tensorfile::{self, HostTensor, TensorMap};

pub const FORMAT: &str = "depstream-checkpoint";
pub const VERSION: u32 = 1;

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Mean absolute frame error over the epoch's training batches.
    pub train_loss: f64,
    pub dev_mae: f64,
    pub dev_rmse: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: u32,
    pub dev_mae: f64,
}

/// Scalars of the training state stored beside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stream: AlignmentMode,
    pub seed: u64,
    pub epoch: u32,
    pub radam: RAdamConfig,
    pub radam_step: u64,
    pub lookahead: LookaheadConfig,
    pub lookahead_counter: u64,
    pub plateau: Plateau,
    pub best: Option<BestRecord>,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// Parameters (the optimizer's full-precision copies) and buffers.
    pub model_state: TensorMap,
    pub moments: BTreeMap<String, Moments>,
    pub slow: BTreeMap<String, Vec<f64>>,
    pub train: TrainState,
}

fn bad(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(msg.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = TensorMap::new();
        for (name, t) in &self.model_state {
            tensors.insert(format!("model.{name}"), t.clone());
        }
        let shape_of = |name: &str, len: usize| -> Vec<usize> {
            self.model_state
                .get(name)
                .map(|t| t.shape.clone())
                .filter(|s| s.iter().product::<usize>() == len)
                .unwrap_or(vec![len])
        };
        for (name, m) in &self.moments {
            tensors.insert(
                format!("optim.m.{name}"),
                HostTensor::new(shape_of(name, m.first.len()), m.first.clone()),
            );
            tensors.insert(
                format!("optim.v.{name}"),
                HostTensor::new(shape_of(name, m.second.len()), m.second.clone()),
            );
        }
        for (name, s) in &self.slow {
            tensors.insert(
                format!("lookahead.slow.{name}"),
                HostTensor::new(shape_of(name, s.len()), s.clone()),
            );
        }
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            ("model_config".to_string(), to_json(&self.model_config)?),
            ("train".to_string(), to_json(&self.train)?),
        ]);
        tensorfile::encode(&tensors, meta).map_err(bad)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tensors, meta) = tensorfile::decode(bytes).map_err(|e| bad(format!("unreadable checkpoint: {e}")))?;
        match meta.get("format") {
            Some(f) if f == FORMAT => {}
            _ => return Err(bad("not a checkpoint file")),
        }
        let version = meta.get("version").ok_or_else(|| bad("missing version"))?;
        if version != &VERSION.to_string() {
            return Err(bad(format!("checkpoint version {version} is not supported (expected {VERSION})")));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing `{k}` metadata")));
        let model_config: ModelConfig =
            serde_json::from_str(field("model_config")?).map_err(|e| bad(format!("model_config: {e}")))?;
        let train: TrainState = serde_json::from_str(field("train")?).map_err(|e| bad(format!("train: {e}")))?;

        let mut model_state = TensorMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        let mut slow = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("model.") {
                model_state.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("optim.m.") {
                first.insert(n.to_string(), t.data);
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                second.insert(n.to_string(), t.data);
            } else if let Some(n) = name.strip_prefix("lookahead.slow.") {
                slow.insert(n.to_string(), t.data);
            } else {
                return Err(bad(format!("unexpected tensor `{name}`")));
            }
        }
        if first.keys().ne(second.keys()) {
            return Err(bad("first and second moments cover different parameters"));
        }
        let moments = first
            .into_iter()
            .zip(second.into_values())
            .map(|((n, first), second)| (n, Moments { first, second }))
            .collect();
        let ckpt = Self {
            model_config,
            model_state,
            moments,
            slow,
            train,
        };
        ckpt.check_consistency()?;
        Ok(ckpt)
    }

    /// Layout agreement between the configuration and the stored tensors.
    fn check_consistency(&self) -> Result<()> {
        self.model_config
            .validate()
            .map_err(|e| bad(format!("stored model config: {e}")))?;
        let reference = state_shapes(&self.model_config);
        if reference.len() != self.model_state.len() {
            return Err(bad(format!(
                "model state has {} tensors, configuration implies {}",
                self.model_state.len(),
                reference.len()
            )));
        }
        for (name, shape) in &reference {
            let got = self
                .model_state
                .get(name)
                .ok_or_else(|| bad(format!("model state lacks `{name}`")))?;
            if &got.shape != shape {
                return Err(bad(format!("`{name}` has shape {:?}, expected {shape:?}", got.shape)));
            }
        }
        for (name, m) in &self.moments {
            let n = self.param_len(name)?;
            if m.first.len() != n || m.second.len() != n {
                return Err(bad(format!("moments of `{name}` do not match the parameter")));
            }
        }
        for (name, s) in &self.slow {
            if s.len() != self.param_len(name)? {
                return Err(bad(format!("slow weights of `{name}` do not match the parameter")));
            }
        }
        Ok(())
    }

    fn param_len(&self, name: &str) -> Result<usize> {
        self.model_state
            .get(name)
            .map(|t| t.data.len())
            .ok_or_else(|| bad(format!("optimizer state for unknown parameter `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("ckpt.partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Inference model with the stored weights.
    pub fn model(&self) -> Result<Model> {
        Model::from_state(&self.model_config, &self.model_state)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(bad)
}

pub fn epoch_file_name(epoch: u32) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Marker files naming the best and the most recent checkpoint.
pub const BEST_MARKER: &str = "best";
pub const LAST_MARKER: &str = "last";

pub fn write_marker(dir: &Path, marker: &str, epoch: u32) -> Result<()> {
    let path = dir.join(marker);
    std::fs::write(&path, format!("{}\n", epoch_file_name(epoch))).map_err(|e| Error::io(&path, e))
}

/// Path of the checkpoint a marker points to.
pub fn resolve_marker(dir: &Path, marker: &str) -> Result<PathBuf> {
    let path = dir.join(marker);
    let name = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("no `{marker}` checkpoint in {}: {e}", dir.display())))?;
    let name = name.trim();
    if name.contains('/') || name.contains('\\') || name.is_empty() {
        return Err(Error::Checkpoint(format!("malformed marker {}", path.display())));
    }
    Ok(dir.join(name))
}
