//! Network checkpoints: a JSON manifest (architecture, seed, training-config
//! hash, tensor table) next to a little-endian `f64` blob holding every
//! tensor of the parameter store in declaration order. Full precision, so a
//! reloaded model predicts bit-for-bit what the trained one did.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GradError, InputShape, LayerSpec, Network, Tensor};

pub const CHECKPOINT_FORMAT: &str = "kinedecode-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
    pub train_config_hash: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> GradError + '_ {
    move |e| GradError::Io(format!("{}: {e}", path.display()))
}

/// Writes `<stem>.json` and `<stem>.f64` under `dir`; returns the manifest path.
pub fn save_checkpoint(
    net: &Network,
    dir: &Path,
    stem: &str,
    train_config_hash: &str,
) -> Result<PathBuf, GradError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let store = net.params();
    let blob_name = format!("{stem}.f64");
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        input: net.input_shape(),
        layers: net.specs(),
        seed: net.seed(),
        train_config_hash: train_config_hash.into(),
        blob: blob_name.clone(),
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).into(),
                shape: store.value(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            })
            .collect(),
    };
    let mut bytes = Vec::new();
    for id in store.ids() {
        for v in store.value(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, bytes).map_err(io(&blob_path))?;
    let path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io(&path))?;
    Ok(path)
}

/// Rebuilds a network from a manifest written by [`save_checkpoint`].
pub fn load_checkpoint(manifest_path: &Path) -> Result<(Network, CheckpointManifest), GradError> {
    let text = fs::read_to_string(manifest_path).map_err(io(manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| GradError::CorruptModel(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(GradError::CorruptModel(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let mut net = Network::new(manifest.input, manifest.layers.clone(), manifest.seed)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob_path = dir.join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(io(&blob_path))?;
    let ids: Vec<_> = net.params().ids().collect();
    if ids.len() != manifest.tensors.len() {
        return Err(GradError::CorruptModel(format!(
            "manifest lists {} tensors; architecture has {}",
            manifest.tensors.len(),
            ids.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 8 * expected {
        return Err(GradError::CorruptModel(format!(
            "blob holds {} bytes; manifest implies {}",
            bytes.len(),
            8 * expected
        )));
    }
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let store = net.params_mut();
        if store.name(id) != entry.name || store.value(id).shape() != entry.shape.as_slice() {
            return Err(GradError::CorruptModel(format!(
                "tensor {} {:?} does not match architecture ({} {:?})",
                entry.name,
                entry.shape,
                store.name(id),
                store.value(id).shape()
            )));
        }
        let data: Vec<f64> = values.by_ref().take(store.value(id).len()).collect();
        *store.value_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    if !net.params().all_finite() {
        return Err(GradError::CorruptModel(
            "non-finite weights in checkpoint".into(),
        ));
    }
    Ok((net, manifest))
}
