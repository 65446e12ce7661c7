//! Directory format: `manifest.json`, `modality_<i>.bin` (little-endian
//! `f64`, row-major `dᵢ × m`) and `labels.bin` (little-endian `u32`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultimodalDataset, Splits};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    n_modalities: usize,
    dims: Vec<usize>,
    n_classes: usize,
    m: usize,
    splits: Splits,
    informativeness: Vec<f64>,
    seed: u64,
}

pub fn modality_file(i: usize) -> String {
    format!("modality_{i}.bin")
}

pub fn save(dataset: &MultimodalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n_modalities: dataset.n_modalities(),
        dims: dataset.dims(),
        n_classes: dataset.n_classes,
        m: dataset.m(),
        splits: dataset.splits.clone(),
        informativeness: dataset.informativeness.clone(),
        seed: dataset.seed,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    for (i, f) in dataset.features.iter().enumerate() {
        write(&dir.join(modality_file(i)), &f.to_le_bytes())?;
    }
    let labels: Vec<u8> = dataset.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    write(&dir.join(LABELS_FILE), &labels)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load(dir: &Path) -> Result<MultimodalDataset> {
    let raw = read(&dir.join(MANIFEST_FILE))?;
    if raw.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::format(MANIFEST_FILE, "file is empty"));
    }
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format("version", format!("unsupported version {}", manifest.version)));
    }
    if manifest.dims.len() != manifest.n_modalities {
        return Err(Error::format(
            "dims",
            format!("{} entries for n_modalities = {}", manifest.dims.len(), manifest.n_modalities),
        ));
    }
    if manifest.informativeness.len() != manifest.n_modalities {
        return Err(Error::format("informativeness", "length differs from n_modalities"));
    }
    let on_disk = count_modality_files(dir)?;
    if on_disk != manifest.n_modalities {
        return Err(Error::format(
            "n_modalities",
            format!("manifest declares {} modalities but {on_disk} feature files exist", manifest.n_modalities),
        ));
    }

    let m = manifest.m;
    let mut features = Vec::with_capacity(manifest.n_modalities);
    for (i, &d) in manifest.dims.iter().enumerate() {
        let bytes = read(&dir.join(modality_file(i)))?;
        if d == 0 || m == 0 || bytes.len() != d * m * 8 {
            return Err(Error::format(
                modality_file(i),
                format!("{} bytes, expected {} for {d} × {m}", bytes.len(), d * m * 8),
            ));
        }
        features.push(Tensor::from_le_bytes(&[d, m], &bytes)?);
    }

    let bytes = read(&dir.join(LABELS_FILE))?;
    if bytes.len() != m * 4 {
        return Err(Error::format(LABELS_FILE, format!("{} bytes, expected {}", bytes.len(), m * 4)));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("chunk of 4")) as usize)
        .collect();

    let dataset = MultimodalDataset {
        features,
        labels,
        n_classes: manifest.n_classes,
        splits: manifest.splits,
        informativeness: manifest.informativeness,
        seed: manifest.seed,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn count_modality_files(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("modality_") && name.ends_with(".bin") {
            count += 1;
        }
    }
    Ok(count)
}
