//! Checkpoints: one `TRAV1` f64 record per parameter layer in a `.ckpt`
//! file, plus a JSON sidecar with the model configuration.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{decode_all, Tensor, TensorError};
use crate::reward_model::{ModelConfig, ModelError, RewardNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub gamma: f64,
    pub layers: Vec<LayerEntry>,
    /// Free-form training provenance (algorithm, seed, iterations).
    #[serde(default)]
    pub train: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: TensorError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("checkpoint layout does not match the model: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sidecar path: `model.ckpt` → `model.json`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_checkpoint(path: &Path, net: &RewardNet, gamma: f64, train: serde_json::Value) -> Result<(), CheckpointError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    let params = net.params();
    let mut bytes = Vec::new();
    for layer in params.layers() {
        let t = Tensor::f64(layer.shape.clone(), params.values[layer.range()].to_vec()).expect("layer shape");
        t.encode_into(&mut bytes);
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let meta = CheckpointMeta {
        model: net.config(),
        gamma,
        layers: params
            .layers()
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                shape: l.shape.clone(),
            })
            .collect(),
        train,
    };
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|source| CheckpointError::Io {
        path: side.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path: side, source })
}

pub fn load_checkpoint(path: &Path) -> Result<(RewardNet, CheckpointMeta), CheckpointError> {
    let meta = load_meta(path)?;
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let tensors = decode_all(&bytes).map_err(|source| CheckpointError::Tensor {
        path: path.to_path_buf(),
        source,
    })?;
    let mut net = RewardNet::zeros(meta.model)?;
    let layers = net.params().layers().to_vec();
    if layers.len() != tensors.len() || layers.len() != meta.layers.len() {
        return Err(CheckpointError::Layout(format!(
            "model has {} layers, file has {} records and {} manifest entries",
            layers.len(),
            tensors.len(),
            meta.layers.len()
        )));
    }
    let mut values = vec![0.0; net.params().len()];
    for ((layer, t), entry) in layers.iter().zip(&tensors).zip(&meta.layers) {
        if layer.name != entry.name || layer.shape != entry.shape || layer.shape != t.dims {
            return Err(CheckpointError::Layout(format!(
                "layer {} {:?}: manifest says {} {:?}, record dims {:?}",
                layer.name, layer.shape, entry.name, entry.shape, t.dims
            )));
        }
        values[layer.range()].copy_from_slice(&t.data.to_f64());
    }
    net.params_mut().set_values(&values);
    Ok((net, meta))
}
