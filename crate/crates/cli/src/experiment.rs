//! Experiment pipelines: generate → train → evaluate, plus the threshold
//! sweep, the order comparison, the robustness study and feature projections.
//!
//! The functions here are pure computations returning reports; writing them
//! to disk is left to [`crate::commands`].

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use equimodal::alignment::AlignmentMode;
use equimodal::data::{generate, MissingMask, MultimodalDataset};
use equimodal::edm::{ContributionReport, ETA};
use equimodal::inference::{chain_forward_on, evaluate, mean_std, robustness_sweep, subset_table, InferenceChain, RobustnessRow};
use equimodal::model::{encode, Method, Model, ParamView};
use equimodal::numerics::{Tape, Tensor};
use equimodal::theory::{fusion_loss, gap, monte_carlo_ordering, Order, OrderingInstance};
use equimodal::training::{final_priority, reschedule, train_epoch, EpochRecord, OrderPolicy, TrainState};
use equimodal::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::projection::{projection_rows, PROJECTION_HEADER};

/// Test-split metrics of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub multi_accuracy: f64,
    pub loss: f64,
    pub per_modality_accuracy: Vec<f64>,
    /// Accuracy of every modality subset, indexed by bitmask.
    pub subset_accuracy: Vec<f64>,
    pub psi_raw: Vec<f64>,
    pub psi: Option<Vec<f64>>,
    pub deviations: Option<Vec<f64>>,
    pub edm: Option<f64>,
    pub priority: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Effective configuration, defaults filled in.
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: FinalMetrics,
    pub robustness: Vec<RobustnessRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Wall-clock breakdown; kept out of the reproducible reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phases: Vec<(String, f64)>,
    pub epochs: Vec<EpochTiming>,
}

impl Timing {
    fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.phases.push((name.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub model: Model,
    pub dataset: MultimodalDataset,
    /// `epoch,modality,pc1,pc2,degenerate` CSV when projections were requested.
    pub projection: Option<String>,
    pub timing: Timing,
}

pub fn final_metrics(model: &Model, method: Method, dataset: &MultimodalDataset, config: &ExperimentConfig) -> Result<FinalMetrics> {
    let batch = dataset.split_batch(config.eval.split)?;
    let chain = InferenceChain::for_model(model, config.training.batch_size);
    let n = model.n_modalities();
    let full = evaluate(model, method, &batch, &MissingMask::all_present(n, batch.len()), &chain)?;
    let table = subset_table(model, method, &batch, &chain)?;
    let report = ContributionReport::from_table(&table, config.training.normalization, ETA, &model.priority)?;
    Ok(FinalMetrics {
        multi_accuracy: full.accuracy,
        loss: full.loss,
        per_modality_accuracy: (0..n).map(|i| table.get(&[i])).collect::<Result<_>>()?,
        subset_accuracy: report.table,
        psi_raw: report.psi_raw,
        psi: report.psi,
        deviations: report.deviations,
        edm: report.edm,
        priority: model.priority.clone(),
    })
}

/// Encoded features of every modality and the fused representation for the
/// samples `idx`, evaluated in inference-sized chunks.
pub fn feature_views(model: &Model, method: Method, dataset: &MultimodalDataset, idx: &[usize], batch_size: usize) -> Result<Vec<(String, Tensor)>> {
    let n = model.n_modalities();
    let mut per_modality: Vec<Vec<Tensor>> = vec![Vec::new(); n];
    let mut fused = Vec::new();
    let chain = InferenceChain::for_model(model, batch_size);
    for chunk in idx.chunks(batch_size) {
        let batch = dataset.batch(chunk)?;
        let encoded = (0..n).map(|i| encode(&batch.features[i], &model.store, &model.encoders[i])).collect::<Result<Vec<_>>>()?;
        let h = match method {
            Method::Ours => {
                let view = ParamView::frozen(&model.store);
                let mut tape = Tape::new();
                let inputs = chain
                    .order
                    .iter()
                    .map(|&k| Ok((k, tape.constant(batch.features[k].clone())?)))
                    .collect::<Result<Vec<_>>>()?;
                let c0 = tape.constant(chain.initial_memory(model, chunk.len()))?;
                let h = chain_forward_on(&mut tape, &view, model, &inputs, c0)?;
                tape.value(h).clone()
            }
            _ => Tensor::concat_rows(&encoded.iter().collect::<Vec<_>>())?,
        };
        for (i, e) in encoded.into_iter().enumerate() {
            per_modality[i].push(e);
        }
        fused.push(h);
    }
    let join = |parts: &[Tensor]| -> Result<Tensor> {
        let t: Vec<Tensor> = parts.iter().map(|p| p.transpose()).collect::<Result<_>>()?;
        Tensor::concat_rows(&t.iter().collect::<Vec<_>>())?.transpose()
    };
    let mut out: Vec<(String, Tensor)> = per_modality
        .iter()
        .enumerate()
        .map(|(i, parts)| Ok((i.to_string(), join(parts)?)))
        .collect::<Result<_>>()?;
    out.push(("fused".to_string(), join(&fused)?));
    Ok(out)
}

fn projection_block(model: &Model, method: Method, dataset: &MultimodalDataset, config: &ExperimentConfig, epoch: usize, out: &mut String) -> Result<()> {
    let split = dataset.splits.get(config.eval.split);
    let idx = &split[..config.eval.projection_samples.min(split.len())];
    for (name, features) in feature_views(model, method, dataset, idx, config.training.batch_size)? {
        projection_rows(epoch, &name, &features, out);
    }
    Ok(())
}

/// Generate (unless `dataset` is given), train, evaluate and optionally
/// project features. `on_epoch` sees every log record as it is produced.
pub fn execute(config: &ExperimentConfig, dataset: Option<MultimodalDataset>, mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>) -> Result<RunOutput> {
    config.validate()?;
    let mut timing = Timing::default();
    let dataset = match dataset {
        Some(d) => d,
        None => timing.phase("generate", || generate(&config.data.data_config(), config.data.seed))?,
    };
    let tc = &config.training;
    let method = tc.mode;
    let model = Model::new(&config.model, &dataset.dims(), dataset.n_classes, tc.seed)?;
    let mut state = TrainState::new(model, tc, &dataset.informativeness)?;
    let mut projection = (!config.eval.projection_epochs.is_empty()).then(|| format!("{PROJECTION_HEADER}\n"));
    let started = Instant::now();
    for epoch in 0..tc.epochs {
        let t = Instant::now();
        let outcome = train_epoch(&mut state, &dataset, tc, None)?;
        let train_seconds = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let record = reschedule(&mut state, &dataset, tc, outcome)?;
        timing.epochs.push(EpochTiming {
            epoch,
            train_seconds,
            eval_seconds: t.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {:.4} val {:.2}% edm {:?} next {:?}",
            record.train_loss,
            record.val_accuracy,
            record.report.edm,
            record.next_order
        );
        on_epoch(&record)?;
        if let Some(out) = projection.as_mut().filter(|_| config.eval.projection_epochs.contains(&epoch)) {
            let mut snapshot = state.model.clone();
            snapshot.priority = final_priority(&state, tc);
            projection_block(&snapshot, method, &dataset, config, epoch, out)?;
        }
    }
    timing.phases.push(("train".into(), started.elapsed().as_secs_f64()));
    let priority = final_priority(&state, tc);
    let mut model = state.model;
    model.priority = priority;
    let metrics = timing.phase("evaluate", || final_metrics(&model, method, &dataset, config))?;
    let robustness = timing.phase("robustness", || {
        if config.eval.robustness_rates.is_empty() {
            return Ok(Vec::new());
        }
        let batch = dataset.split_batch(config.eval.split)?;
        let chain = InferenceChain::for_model(&model, tc.batch_size);
        robustness_sweep(&model, method, &batch, &config.eval.robustness_rates, &config.eval.robustness_seeds, &chain)
    })?;
    Ok(RunOutput {
        report: RunReport {
            config: config.clone(),
            epochs: state.log,
            final_metrics: metrics,
            robustness,
        },
        model,
        dataset,
        projection,
        timing,
    })
}

/// Map `f` over `items` on all available cores; results keep item order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let r = f(&items[k]);
                slots.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// Summary of one trained cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub multi_accuracy: f64,
    pub edm: Option<f64>,
    /// Validation EDM after the first and the last epoch.
    pub first_epoch_edm: Option<f64>,
    pub final_epoch_edm: Option<f64>,
}

pub fn run_cell(config: &ExperimentConfig) -> Result<CellResult> {
    let mut config = config.clone();
    config.eval.robustness_rates.clear();
    config.eval.projection_epochs.clear();
    let out = execute(&config, None, |_| Ok(()))?;
    let log = &out.report.epochs;
    Ok(CellResult {
        seed: config.training.seed,
        multi_accuracy: out.report.final_metrics.multi_accuracy,
        edm: out.report.final_metrics.edm,
        first_epoch_edm: log.first().and_then(|r| r.report.edm),
        final_epoch_edm: log.last().and_then(|r| r.report.edm),
    })
}

fn mean_of_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub multi_acc: f64,
    pub edm: Option<f64>,
    pub cells: Vec<CellResult>,
}

/// One model per `(τ, seed)`; rows average over `eval.sweep_seeds`.
pub fn sweep_threshold(config: &ExperimentConfig) -> Result<Vec<ThresholdRow>> {
    config.validate()?;
    let grid = &config.eval.threshold_grid;
    let seeds = &config.eval.sweep_seeds;
    let cells: Vec<(f64, u64)> = grid.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    let results = parallel_map(&cells, |&(tau, seed)| {
        let mut c = config.with_seed(seed);
        c.model.alignment = AlignmentMode::Threshold { tau };
        run_cell(&c)
    })?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &tau)| {
            let cells = results[g * seeds.len()..(g + 1) * seeds.len()].to_vec();
            ThresholdRow {
                tau,
                multi_acc: cells.iter().map(|c| c.multi_accuracy).sum::<f64>() / cells.len() as f64,
                edm: mean_of_some(cells.iter().map(|c| c.edm)),
                cells,
            }
        })
        .collect())
}

pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("tau,multi_acc,edm\n");
    for r in rows {
        let edm = r.edm.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.tau, r.multi_acc, edm));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: OrderPolicy,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_edm: Option<f64>,
    pub std_edm: Option<f64>,
    pub cells: Vec<CellResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderComparison {
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicySummary>,
    /// Seeds on which fixed weak-to-strong beat fixed strong-to-weak.
    pub w2s_wins: usize,
    pub ties: usize,
}

pub const COMPARED_POLICIES: [OrderPolicy; 4] = [OrderPolicy::Edm, OrderPolicy::W2s, OrderPolicy::S2w, OrderPolicy::Random];

/// Every policy on the same seeds (paired).
pub fn compare_orders(config: &ExperimentConfig) -> Result<OrderComparison> {
    config.validate()?;
    let seeds = config.eval.order_seeds.clone();
    let cells: Vec<(OrderPolicy, u64)> = COMPARED_POLICIES.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    let results = parallel_map(&cells, |&(policy, seed)| {
        let mut c = config.with_seed(seed);
        c.training.order = policy;
        run_cell(&c)
    })?;
    let policies: Vec<PolicySummary> = COMPARED_POLICIES
        .iter()
        .enumerate()
        .map(|(p, &policy)| {
            let cells = results[p * seeds.len()..(p + 1) * seeds.len()].to_vec();
            let (mean_acc, std_acc) = mean_std(&cells.iter().map(|c| c.multi_accuracy).collect::<Vec<_>>());
            let edms: Vec<f64> = cells.iter().filter_map(|c| c.edm).collect();
            let (mean_edm, std_edm) = if edms.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&edms);
                (Some(m), Some(s))
            };
            PolicySummary {
                policy,
                mean_acc,
                std_acc,
                mean_edm,
                std_edm,
                cells,
            }
        })
        .collect();
    let (w2s, s2w) = (&policies[1].cells, &policies[2].cells);
    let w2s_wins = w2s.iter().zip(s2w).filter(|(a, b)| a.multi_accuracy > b.multi_accuracy).count();
    let ties = w2s.iter().zip(s2w).filter(|(a, b)| a.multi_accuracy == b.multi_accuracy).count();
    Ok(OrderComparison {
        seeds,
        policies,
        w2s_wins,
        ties,
    })
}

/// One model per seed in `eval.robustness_seeds`, each evaluated under
/// missingness drawn from its own seed; statistics are across seeds.
pub fn robustness_study(config: &ExperimentConfig) -> Result<Vec<RobustnessRow>> {
    config.validate()?;
    if config.eval.robustness_rates.is_empty() {
        return Err(Error::config("eval.robustness_rates", "at least one rate is required"));
    }
    let per_seed = parallel_map(&config.eval.robustness_seeds, |&seed| {
        let mut c = config.with_seed(seed);
        c.eval.robustness_rates.clear();
        c.eval.projection_epochs.clear();
        let out = execute(&c, None, |_| Ok(()))?;
        let batch = out.dataset.split_batch(c.eval.split)?;
        let chain = InferenceChain::for_model(&out.model, c.training.batch_size);
        robustness_sweep(&out.model, c.training.mode, &batch, &config.eval.robustness_rates, &[seed], &chain)
    })?;
    Ok(config
        .eval
        .robustness_rates
        .iter()
        .enumerate()
        .map(|(r, &rate)| {
            let accs: Vec<f64> = per_seed.iter().map(|rows| rows[r].mean_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            RobustnessRow {
                rate,
                mean_acc,
                std_acc,
                n_seeds: accs.len(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub instance: OrderingInstance<f64>,
    pub loss_w2s: f64,
    pub loss_s2w: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRow {
    pub kappa: f64,
    pub trials: usize,
    pub fraction_positive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub closed_form: Vec<TheoryRow>,
    pub monte_carlo: Vec<MonteCarloRow>,
}

pub fn reference_instances() -> Vec<OrderingInstance<f64>> {
    let mk = |alpha1: f64, delta1, delta2, epsilon| OrderingInstance {
        alpha1,
        alpha2: 1.0 - alpha1,
        delta1,
        delta2,
        epsilon,
    };
    vec![
        mk(0.2, 0.3, 0.5, 0.05),
        mk(0.2, 0.3, 0.3, 0.05),
        mk(0.0, 0.3, 0.5, 0.05),
        mk(0.1, 0.2, 0.8, 0.01),
        mk(0.3, 0.6, 0.4, 0.02),
    ]
}

pub fn theory_check(kappas: &[f64], trials: usize, seed: u64) -> Result<TheoryReport> {
    let closed_form = reference_instances()
        .into_iter()
        .map(|instance| {
            Ok(TheoryRow {
                loss_w2s: fusion_loss(&instance, Order::W2s)?,
                loss_s2w: fusion_loss(&instance, Order::S2w)?,
                gap: gap(&instance)?,
                instance,
            })
        })
        .collect::<Result<_>>()?;
    let monte_carlo = kappas
        .iter()
        .map(|&kappa| {
            Ok(MonteCarloRow {
                kappa,
                trials,
                fraction_positive: monte_carlo_ordering(kappa, trials, seed)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TheoryReport {
        seed,
        closed_form,
        monte_carlo,
    })
}
