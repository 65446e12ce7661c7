//! Subcommand bodies: run a pipeline and write its artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use equimodal::data::{self, MultimodalDataset};
use equimodal::inference::{robustness_csv, robustness_sweep, InferenceChain};
use equimodal::model::{load_checkpoint, save_checkpoint};
use equimodal::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{
    compare_orders, execute, final_metrics, robustness_study, sweep_threshold, theory_check, threshold_csv, TheoryReport,
};
use crate::manifest::{ArtifactWriter, HashMismatch};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const EPOCH_LOG_FILE: &str = "epoch_log.jsonl";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";
pub const PROJECTION_FILE: &str = "projection.csv";
pub const THRESHOLD_FILE: &str = "threshold.csv";
pub const THRESHOLD_CELLS_FILE: &str = "threshold_cells.json";
pub const ORDERS_FILE: &str = "compare_orders.json";
pub const EVAL_FILE: &str = "eval.json";
pub const THEORY_FILE: &str = "theory.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATA_DIR: &str = "data";

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn start(config: &ExperimentConfig, out: &Path) -> Result<ArtifactWriter> {
    let mut w = ArtifactWriter::new(out)?;
    w.write(CONFIG_FILE, (config.to_json() + "\n").as_bytes())?;
    Ok(w)
}

fn dataset_for(data_dir: Option<&Path>) -> Result<Option<MultimodalDataset>> {
    data_dir.map(data::load).transpose()
}

pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<Vec<HashMismatch>> {
    config.validate()?;
    let mut w = start(config, out)?;
    let dataset = data::generate(&config.data.data_config(), config.data.seed)?;
    data::save(&dataset, &out.join(DATA_DIR))?;
    w.track_dir(DATA_DIR)?;
    w.finish()
}

/// generate → train → evaluate; writes the report, the epoch log, the
/// checkpoint and, when configured, robustness and projection tables.
pub fn train(config: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<Vec<HashMismatch>> {
    config.validate()?;
    let mut w = start(config, out)?;
    let dataset = dataset_for(data_dir)?;
    let log_path = out.join(EPOCH_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let output = execute(config, dataset, |record| {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
    })?;
    drop(log);
    w.track_existing(EPOCH_LOG_FILE)?;
    save_checkpoint(&output.model, &out.join(CHECKPOINT_DIR))?;
    w.track_dir(CHECKPOINT_DIR)?;
    if !output.report.robustness.is_empty() {
        w.write(ROBUSTNESS_FILE, robustness_csv(&output.report.robustness).as_bytes())?;
    }
    if let Some(p) = &output.projection {
        w.write(PROJECTION_FILE, p.as_bytes())?;
    }
    w.write(REPORT_FILE, to_json(&output.report).as_bytes())?;
    w.write_volatile(TIMING_FILE, to_json(&output.timing).as_bytes())?;
    w.finish()
}

/// Same pipeline as [`train`]; requires at least one projection epoch and
/// defaults to the last one.
pub fn project_features(config: &ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<Vec<HashMismatch>> {
    let mut config = config.clone();
    if config.eval.projection_epochs.is_empty() {
        config.eval.projection_epochs = vec![config.training.epochs.saturating_sub(1)];
    }
    train(&config, out, data_dir)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config: &'a ExperimentConfig,
    final_metrics: crate::experiment::FinalMetrics,
}

/// Evaluate a saved checkpoint on the configured split.
pub fn eval(config: &ExperimentConfig, out: &Path, checkpoint: &Path, data_dir: Option<&Path>) -> Result<Vec<HashMismatch>> {
    config.validate()?;
    let model = load_checkpoint(checkpoint)?;
    let dataset = match dataset_for(data_dir)? {
        Some(d) => d,
        None => data::generate(&config.data.data_config(), config.data.seed)?,
    };
    if dataset.dims() != model.dims || dataset.n_classes != model.n_classes {
        return Err(Error::config(
            "data",
            format!("dataset dims {:?} / {} classes do not match the checkpoint", dataset.dims(), dataset.n_classes),
        ));
    }
    let mut w = start(config, out)?;
    let method = config.training.mode;
    let report = EvalReport {
        config,
        final_metrics: final_metrics(&model, method, &dataset, config)?,
    };
    w.write(EVAL_FILE, to_json(&report).as_bytes())?;
    if !config.eval.robustness_rates.is_empty() {
        let batch = dataset.split_batch(config.eval.split)?;
        let chain = InferenceChain::for_model(&model, config.training.batch_size);
        let rows = robustness_sweep(&model, method, &batch, &config.eval.robustness_rates, &config.eval.robustness_seeds, &chain)?;
        w.write(ROBUSTNESS_FILE, robustness_csv(&rows).as_bytes())?;
    }
    w.finish()
}

pub fn sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<HashMismatch>> {
    let rows = sweep_threshold(config)?;
    let mut w = start(config, out)?;
    w.write(THRESHOLD_FILE, threshold_csv(&rows).as_bytes())?;
    w.write(THRESHOLD_CELLS_FILE, to_json(&rows).as_bytes())?;
    w.finish()
}

pub fn orders(config: &ExperimentConfig, out: &Path) -> Result<Vec<HashMismatch>> {
    let summary = compare_orders(config)?;
    let mut w = start(config, out)?;
    w.write(ORDERS_FILE, to_json(&summary).as_bytes())?;
    w.finish()
}

pub fn robustness(config: &ExperimentConfig, out: &Path) -> Result<Vec<HashMismatch>> {
    let rows = robustness_study(config)?;
    let mut w = start(config, out)?;
    w.write(ROBUSTNESS_FILE, robustness_csv(&rows).as_bytes())?;
    w.finish()
}

/// Returns the JSON report; also writes it when `out` is given.
pub fn theory(out: Option<&Path>, kappas: &[f64], trials: usize, seed: u64) -> Result<(String, Vec<HashMismatch>)> {
    let report: TheoryReport = theory_check(kappas, trials, seed)?;
    let text = to_json(&report);
    let mismatches = match out {
        Some(dir) => {
            let mut w = ArtifactWriter::new(dir)?;
            w.write(THEORY_FILE, text.as_bytes())?;
            w.finish()?
        }
        None => Vec::new(),
    };
    Ok((text, mismatches))
}
