//! Synthetic multimodal classification data.
//!
//! Every modality of a sample with class `y` is `ρᵢ·μ_{y,i} + (1−ρᵢ)·σ·ε`,
//! where `μ_{y,i}` is a per-class prototype and `ε` is standard normal
//! noise. `ρᵢ` (informativeness) sets how learnable modality `i` is.

mod io;
mod missing;

pub use io::{load, save, MANIFEST_FILE, LABELS_FILE, FORMAT_VERSION};
pub use missing::{apply_missing, drop_probability, MissingMask};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dims: Vec<usize>,
    pub n_classes: usize,
    pub m: usize,
    pub informativeness: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fractions `[train, val, test]`, applied per class.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_noise() -> f64 {
    1.0
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

impl DataConfig {
    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n == 0 {
            return Err(Error::config("data.dims", "at least one modality is required"));
        }
        if self.informativeness.len() != n {
            return Err(Error::config(
                "data.informativeness",
                format!("expected {n} values (one per modality), got {}", self.informativeness.len()),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::config("data.n_classes", "need at least two classes"));
        }
        if let Some((i, d)) = self.dims.iter().enumerate().find(|(_, &d)| d < self.n_classes) {
            return Err(Error::config(
                "data.dims",
                format!("modality {i} has {d} dims, fewer than n_classes = {}", self.n_classes),
            ));
        }
        if let Some(r) = self.informativeness.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("data.informativeness", format!("{r} is outside [0, 1]")));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be finite and non-negative"));
        }
        if self.split.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", "fractions must be positive and sum to 1"));
        }
        let per_class = self.m / self.n_classes;
        let smallest = self.split[1].min(self.split[2]);
        if per_class == 0 || (per_class as f64 * smallest).round() < 1.0 || per_class < 3 {
            return Err(Error::config(
                "data.m",
                format!("{} samples leave an empty split for {} classes", self.m, self.n_classes),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Every split nonempty and together they partition `[0, m)`.
    pub(crate) fn validate(&self, m: usize) -> Result<()> {
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if part.is_empty() {
                return Err(Error::format(format!("splits.{name}"), "split is empty"));
            }
        }
        let mut seen = vec![false; m];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= m || seen[i] {
                return Err(Error::format("splits", format!("index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::format("splits", "splits do not cover every sample"));
        }
        Ok(())
    }
}

/// Feature matrices (`dᵢ × m`, one column per sample) sharing one label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub splits: Splits,
    pub informativeness: Vec<f64>,
    pub seed: u64,
}

/// A column subset of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            features: self.features.iter().map(|f| f.select_columns(idx)).collect::<Result<_>>()?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

impl MultimodalDataset {
    pub fn n_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.rows()).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            features: self.features.iter().map(|f| f.select_columns(idx)).collect::<Result<_>>()?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn split_batch(&self, split: Split) -> Result<Batch> {
        self.batch(self.splits.get(split))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.features.is_empty() {
            return Err(Error::format("n_modalities", "dataset has no modalities"));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.cols() != m {
                return Err(Error::format(
                    format!("modality_{i}"),
                    format!("{} samples, labels have {m}", f.cols()),
                ));
            }
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.n_classes) {
            return Err(Error::format("labels", format!("label {l} at {i} exceeds n_classes {}", self.n_classes)));
        }
        self.splits.validate(m)
    }
}

/// Deterministically generate a dataset from `config` and `seed`.
pub fn generate(config: &DataConfig, seed: u64) -> Result<MultimodalDataset> {
    config.validate()?;
    let k = config.n_classes;
    let m = config.m;

    let mut proto_rng = rng_for(seed, Stream::Prototypes);
    let prototypes: Vec<Tensor> = config
        .dims
        .iter()
        .map(|&d| Tensor::random_normal(&[d, k], 1.0, &mut proto_rng))
        .collect();

    let mut labels: Vec<usize> = (0..m).map(|s| s % k).collect();
    labels.shuffle(&mut rng_for(seed, Stream::Labels));

    let mut noise_rng = rng_for(seed, Stream::Noise);
    let mut features = Vec::with_capacity(config.dims.len());
    for (i, &d) in config.dims.iter().enumerate() {
        let rho = config.informativeness[i];
        let eps = Tensor::random_normal(&[d, m], config.noise, &mut noise_rng);
        let mut x = Tensor::zeros(&[d, m]);
        for r in 0..d {
            for (s, &y) in labels.iter().enumerate() {
                x.set(r, s, rho * prototypes[i].get(r, y) + (1.0 - rho) * eps.get(r, s));
            }
        }
        features.push(x);
    }

    let splits = stratified_splits(&labels, k, config.split, seed);
    let dataset = MultimodalDataset {
        features,
        labels,
        n_classes: k,
        splits,
        informativeness: config.informativeness.clone(),
        seed,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn stratified_splits(labels: &[usize], k: usize, fractions: [f64; 3], seed: u64) -> Splits {
    let mut rng = rng_for(seed, Stream::Splits);
    let mut splits = Splits {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for class in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&s| labels[s] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = (n as f64 * fractions[1]).round() as usize;
        let n_test = (n as f64 * fractions[2]).round() as usize;
        let n_train = n - n_val - n_test;
        splits.train.extend_from_slice(&members[..n_train]);
        splits.val.extend_from_slice(&members[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&members[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    splits
}
