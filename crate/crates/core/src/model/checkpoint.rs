//! Checkpoint directory: `checkpoint.json` plus one little-endian `f64` blob
//! per parameter (`param_<k>.bin`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::numerics::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    dims: Vec<usize>,
    n_classes: usize,
    priority: Vec<usize>,
    memory: MemoryState,
    params: Vec<Entry>,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.store.len());
    for (id, name, value) in model.store.iter() {
        let file = format!("param_{}.bin", id.0);
        let path = dir.join(&file);
        fs::write(&path, value.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        params.push(Entry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        config: model.config.clone(),
        dims: model.dims.clone(),
        n_classes: model.n_classes,
        priority: model.priority.clone(),
        memory: model.memory_state.clone(),
        params,
    };
    let path = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("checkpoint serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(CHECKPOINT_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::format(CHECKPOINT_FILE, e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::format("version", format!("unsupported version {}", manifest.version)));
    }
    let mut model = Model::new(&manifest.config, &manifest.dims, manifest.n_classes, 0)?;
    if manifest.params.len() != model.store.len() {
        return Err(Error::format(
            "params",
            format!("{} entries, architecture has {}", manifest.params.len(), model.store.len()),
        ));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.params) {
        let expected = model.store.get(id).shape().to_vec();
        if entry.name != model.store.name(id) || entry.shape != expected {
            return Err(Error::format("params", format!("entry {} does not match the architecture", entry.name)));
        }
        let blob = dir.join(&entry.file);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let value = Tensor::from_le_bytes(&entry.shape, &bytes).map_err(|_| Error::format(entry.file.clone(), "size mismatch"))?;
        model.store.set(id, value);
    }
    let mut sorted = manifest.priority.clone();
    sorted.sort_unstable();
    if sorted != (0..model.n_modalities()).collect::<Vec<_>>() {
        return Err(Error::format("priority", "not a permutation of modality indices"));
    }
    if manifest.memory.carry.len() != model.d_feat() {
        return Err(Error::format("memory.carry", "length differs from d_feat"));
    }
    model.priority = manifest.priority;
    model.memory_state = manifest.memory;
    Ok(model)
}
