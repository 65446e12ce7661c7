use std::path::{Path, PathBuf};

use equimodal::alignment::default_tau_grid;
use equimodal::data::{DataConfig, Split};
use equimodal::model::ModelConfig;
use equimodal::training::TrainingConfig;
use equimodal::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dims: Vec<usize>,
    pub n_classes: usize,
    pub m: usize,
    pub informativeness: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

impl DataSection {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            dims: self.dims.clone(),
            n_classes: self.n_classes,
            m: self.m,
            informativeness: self.informativeness.clone(),
            noise: self.noise,
            split: self.split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Split used for final metrics, robustness and projections.
    pub split: Split,
    pub robustness_rates: Vec<f64>,
    /// Missingness seeds for a single model; training seeds for `robustness`.
    pub robustness_seeds: Vec<u64>,
    pub threshold_grid: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub order_seeds: Vec<u64>,
    /// Epochs (0-based, after training) at which features are projected.
    pub projection_epochs: Vec<usize>,
    pub projection_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            robustness_rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            robustness_seeds: vec![0, 1, 2, 3, 4],
            threshold_grid: default_tau_grid(),
            sweep_seeds: vec![0, 1, 2],
            order_seeds: (0..10).collect(),
            projection_epochs: Vec::new(),
            projection_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Where artifacts go. Not written back out, so reports from the same
    /// experiment are identical wherever they are stored.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn check_unit_interval(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::config(field, format!("{v} is outside [0, 1]"))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    /// Strict parse: unknown keys and type errors name the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "config".into() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The effective configuration with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let data = self.data.data_config();
        data.validate()?;
        self.model.validate()?;
        self.training.validate(data.n_modalities())?;
        let eval = &self.eval;
        check_unit_interval("eval.robustness_rates", &eval.robustness_rates)?;
        check_unit_interval("eval.threshold_grid", &eval.threshold_grid)?;
        for (field, seeds) in [
            ("eval.robustness_seeds", &eval.robustness_seeds),
            ("eval.sweep_seeds", &eval.sweep_seeds),
            ("eval.order_seeds", &eval.order_seeds),
        ] {
            if seeds.is_empty() {
                return Err(Error::config(field, "at least one seed is required"));
            }
        }
        if let Some(e) = eval.projection_epochs.iter().find(|&&e| e >= self.training.epochs) {
            return Err(Error::config(
                "eval.projection_epochs",
                format!("epoch {e} is past the last epoch {}", self.training.epochs - 1),
            ));
        }
        if eval.projection_samples == 0 {
            return Err(Error::config("eval.projection_samples", "must be positive"));
        }
        Ok(())
    }

    /// The same experiment with both the data and the training seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut config = self.clone();
        config.data.seed = seed;
        config.training.seed = seed;
        config
    }
}
