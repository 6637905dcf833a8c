//! safetensors checkpoints carrying the model config and its hash.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::detector::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "rcdet-checkpoint-v1";
const KEY_FORMAT: &str = "format";
const KEY_CONFIG: &str = "model_config";
const KEY_HASH: &str = "config_hash";

/// SHA-256 of the config's JSON form, hex encoded.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes every parameter and buffer as f32 plus the config metadata.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .entries()
        .map(|(_, e)| {
            let data = e
                .value
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            (e.name.clone(), e.value.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, d)| {
            Ok((
                n.as_str(),
                TensorView::new(Dtype::F32, s.clone(), d).map_err(st_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([
        (KEY_FORMAT.to_string(), FORMAT.to_string()),
        (KEY_CONFIG.to_string(), serde_json::to_string(cfg)?),
        (KEY_HASH.to_string(), config_hash(cfg)),
    ]);
    let buf = safetensors::serialize(views, Some(meta)).map_err(st_err)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Rebuilds the model from the stored config and fills in every tensor.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ctx(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get(KEY_FORMAT).map(String::as_str) != Some(FORMAT) {
        return Err(ctx(format!("not a {FORMAT} file")));
    }
    let cfg_json = meta
        .get(KEY_CONFIG)
        .ok_or_else(|| ctx("missing model config".into()))?;
    let cfg: ModelConfig = serde_json::from_str(cfg_json)?;
    let stored_hash = meta.get(KEY_HASH).cloned().unwrap_or_default();
    let actual = config_hash(&cfg);
    if stored_hash != actual {
        return Err(ctx(format!(
            "config hash {stored_hash} does not match its config ({actual})"
        )));
    }
    let (model, mut store) = Model::new::<f32>(&cfg, 0)?;
    let tensors = SafeTensors::deserialize(&buf).map_err(|e| ctx(e.to_string()))?;
    if tensors.len() != store.len() {
        return Err(ctx(format!(
            "{} tensors stored, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let view = tensors
            .tensor(&name)
            .map_err(|_| ctx(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F32 {
            return Err(ctx(format!(
                "tensor {name} is {:?}, expected F32",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store
            .set(id, Tensor::new(view.shape(), data)?)
            .map_err(|e| ctx(format!("{name}: {e}")))?;
    }
    Ok((model, store))
}

/// Loads a checkpoint that must have been trained with `expected`.
pub fn load_checkpoint_for(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(Model, ParamStore<f32>)> {
    let (model, store) = load_checkpoint(path)?;
    let (want, got) = (config_hash(expected), config_hash(&model.cfg));
    if want != got {
        return Err(Error::Checkpoint(format!(
            "{} was trained with config {got}, but the requested config hashes to {want}",
            path.display()
        )));
    }
    Ok((model, store))
}
