use rand::Rng;

use super::MultimodalDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Per-sample modality presence; `true` means present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissingMask {
    n_modalities: usize,
    n_samples: usize,
    present: Vec<bool>,
}

impl MissingMask {
    /// `present` is laid out `[n_modalities × n_samples]` row-major.
    pub fn new(n_modalities: usize, n_samples: usize, present: Vec<bool>) -> Result<Self> {
        if present.len() != n_modalities * n_samples {
            return Err(Error::Dimension {
                op: "missing_mask",
                left: vec![n_modalities, n_samples],
                right: vec![present.len()],
            });
        }
        let mask = MissingMask {
            n_modalities,
            n_samples,
            present,
        };
        if let Some(s) = (0..n_samples).find(|&s| mask.present_modalities(s).next().is_none()) {
            return Err(Error::EmptyChain(s));
        }
        Ok(mask)
    }

    pub fn all_present(n_modalities: usize, n_samples: usize) -> Self {
        MissingMask {
            n_modalities,
            n_samples,
            present: vec![true; n_modalities * n_samples],
        }
    }

    /// Only the modalities in `subset` present for every sample.
    pub fn only(subset: &[usize], n_modalities: usize, n_samples: usize) -> Result<Self> {
        let mut present = vec![false; n_modalities * n_samples];
        for &i in subset {
            if i >= n_modalities {
                return Err(Error::config("subset", format!("modality {i} does not exist")));
            }
            present[i * n_samples..(i + 1) * n_samples].fill(true);
        }
        MissingMask::new(n_modalities, n_samples, present)
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn is_present(&self, modality: usize, sample: usize) -> bool {
        self.present[modality * self.n_samples + sample]
    }

    pub fn present_modalities(&self, sample: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_modalities).filter(move |&i| self.is_present(i, sample))
    }

    /// Fraction of (modality, sample) entries that are dropped.
    pub fn drop_fraction(&self) -> f64 {
        let dropped = self.present.iter().filter(|p| !**p).count();
        dropped as f64 / self.present.len() as f64
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Sample bitmask of present modalities (bit `i` = modality `i`).
    pub fn pattern(&self, sample: usize) -> u32 {
        self.present_modalities(sample).fold(0, |acc, i| acc | (1 << i))
    }

    /// Draw a mask in which, in expectation, a fraction `rate` of entries
    /// is dropped while every sample keeps at least one modality.
    pub fn sample(n_modalities: usize, n_samples: usize, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&rate) {
            return Err(Error::config("rate", format!("{rate} is outside [0, 0.5]")));
        }
        let p = drop_probability(rate, n_modalities);
        let mut rng = rng_for(seed, Stream::Missing);
        let mut present = vec![true; n_modalities * n_samples];
        for s in 0..n_samples {
            let mut kept = 0;
            for i in 0..n_modalities {
                let keep = !rng.random_bool(p);
                present[i * n_samples + s] = keep;
                kept += usize::from(keep);
            }
            if kept == 0 {
                let restore = rng.random_range(0..n_modalities);
                present[restore * n_samples + s] = true;
            }
        }
        MissingMask::new(n_modalities, n_samples, present)
    }
}

/// Per-entry drop probability `p` whose drop-then-restore-one scheme
/// realizes an expected drop fraction of `rate`: solves `p − pⁿ/n = rate`.
///
/// A single modality can never be dropped, so `n = 1` always yields 0.
pub fn drop_probability(rate: f64, n_modalities: usize) -> f64 {
    if n_modalities < 2 || rate <= 0.0 {
        return 0.0;
    }
    let n = n_modalities as f64;
    let realized = |p: f64| p - p.powf(n) / n;
    if realized(1.0) <= rate {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if realized(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Missing-modality mask over every sample of `dataset`.
pub fn apply_missing(dataset: &MultimodalDataset, rate: f64, seed: u64) -> Result<MissingMask> {
    MissingMask::sample(dataset.n_modalities(), dataset.m(), rate, seed)
}
