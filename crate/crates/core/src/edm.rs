//! Modality contributions as exact Shapley values over subset accuracies,
//! the equilibrium deviation score and the resulting priority order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ideal per-modality contribution in share mode.
pub const ETA: f64 = 100.0;
/// Largest modality count for exact enumeration.
pub const MAX_MODALITIES: usize = 12;

/// Accuracy (percent) for every subset of modalities, indexed by bitmask
/// (bit `i` set = modality `i` present).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPerformanceTable {
    n: usize,
    values: Vec<Option<f64>>,
}

pub fn mask_of(subset: &[usize]) -> usize {
    subset.iter().fold(0, |acc, &i| acc | (1 << i))
}

pub fn subset_of(mask: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| mask & (1 << i) != 0).collect()
}

impl SubsetPerformanceTable {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_MODALITIES {
            return Err(Error::config("n_modalities", format!("{n} is outside 1..={MAX_MODALITIES}")));
        }
        Ok(SubsetPerformanceTable {
            n,
            values: vec![None; 1 << n],
        })
    }

    /// Fill every subset from `f(subset)`.
    pub fn from_fn(n: usize, mut f: impl FnMut(&[usize]) -> Result<f64>) -> Result<Self> {
        let mut table = Self::new(n)?;
        for mask in 0..1usize << n {
            table.values[mask] = Some(f(&subset_of(mask, n))?);
        }
        Ok(table)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, subset: &[usize], value: f64) {
        self.values[mask_of(subset)] = Some(value);
    }

    pub fn get(&self, subset: &[usize]) -> Result<f64> {
        self.get_mask(mask_of(subset))
    }

    pub fn get_mask(&self, mask: usize) -> Result<f64> {
        self.values[mask].ok_or_else(|| Error::MissingSubset(subset_of(mask, self.n)))
    }

    pub fn full(&self) -> Result<f64> {
        self.get_mask((1 << self.n) - 1)
    }

    pub fn empty(&self) -> Result<f64> {
        self.get_mask(0)
    }

    /// Values by bitmask; errors on the first missing subset.
    pub fn values(&self) -> Result<Vec<f64>> {
        (0..self.values.len()).map(|m| self.get_mask(m)).collect()
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Exact Shapley value of every modality.
pub fn shapley(table: &SubsetPerformanceTable) -> Result<Vec<f64>> {
    let n = table.n;
    let values = table.values()?;
    let weights: Vec<f64> = (0..n).map(|s| factorial(s) * factorial(n - s - 1) / factorial(n)).collect();
    Ok((0..n)
        .map(|i| {
            let bit = 1 << i;
            (0..1usize << n)
                .filter(|s| s & bit == 0)
                .map(|s| weights[s.count_ones() as usize] * (values[s | bit] - values[s]))
                .sum()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `ψᵢ = n·100·ψᵢ_raw / Σψ_raw`; a balanced model scores 100 everywhere.
    #[default]
    Share,
    Raw,
}

pub fn normalize(psi_raw: &[f64], mode: Normalization) -> Result<Vec<f64>> {
    match mode {
        Normalization::Raw => Ok(psi_raw.to_vec()),
        Normalization::Share => {
            let total: f64 = psi_raw.iter().sum();
            if !(total > 0.0) {
                return Err(Error::DegenerateContribution(total));
            }
            let n = psi_raw.len() as f64;
            Ok(psi_raw.iter().map(|p| n * 100.0 * p / total).collect())
        }
    }
}

/// Per-modality `|η − ψᵢ|` and their sum.
pub fn edm_score(psi: &[f64], eta: f64) -> (Vec<f64>, f64) {
    let deviations: Vec<f64> = psi.iter().map(|p| (eta - p).abs()).collect();
    let total = deviations.iter().sum();
    (deviations, total)
}

/// Modalities by descending deficit `η − ψᵢ`; lower index first on ties.
pub fn priority_order(psi: &[f64], eta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| (eta - psi[b]).total_cmp(&(eta - psi[a])).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    /// Subset accuracies by bitmask.
    pub table: Vec<f64>,
    pub psi_raw: Vec<f64>,
    pub psi: Option<Vec<f64>>,
    pub deviations: Option<Vec<f64>>,
    pub edm: Option<f64>,
    pub eta: f64,
    pub normalization: Normalization,
    pub priority: Vec<usize>,
    /// Share normalization was impossible and `priority` is the previous order.
    pub degenerate: bool,
}

impl ContributionReport {
    pub fn from_table(
        table: &SubsetPerformanceTable,
        mode: Normalization,
        eta: f64,
        previous: &[usize],
    ) -> Result<Self> {
        let psi_raw = shapley(table)?;
        let values = table.values()?;
        match normalize(&psi_raw, mode) {
            Ok(psi) => {
                let (deviations, edm) = edm_score(&psi, eta);
                Ok(ContributionReport {
                    table: values,
                    priority: priority_order(&psi, eta),
                    psi_raw,
                    psi: Some(psi),
                    deviations: Some(deviations),
                    edm: Some(edm),
                    eta,
                    normalization: mode,
                    degenerate: false,
                })
            }
            Err(Error::DegenerateContribution(total)) => {
                log::warn!("contributions sum to {total}; keeping the previous order");
                Ok(ContributionReport {
                    table: values,
                    psi_raw,
                    psi: None,
                    deviations: None,
                    edm: None,
                    eta,
                    normalization: mode,
                    priority: previous.to_vec(),
                    degenerate: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}
