//! Trainers: contribution-guided alternating training with alignment and
//! memory, plus the joint, plain-alternating and late-fusion baselines.
//!
//! For the alternating trainer every batch walks the current priority order
//! in sliding adjacent pairs `(o₀,o₁), (o₁,o₂), …`. Each pair `(i, j)` takes
//! two optimizer steps:
//!
//! 1. classify `Hᵢ` and update `{θᵢ, ζ}`. The chain head uses `Hᵢ = Xᵢ`;
//!    any later modality recomputes its fused state from the (detached)
//!    previous pair with only `θᵢ` live.
//! 2. align `Xⱼ` against the detached `Xᵢ`, fuse into the detached `Hᵢ`
//!    through the memory cell, classify `Hⱼ` (plus `Xⱼ` on its own, by
//!    default) and update `{θⱼ, memory cell, gate, ζ}`.
//!
//! The context `c` threads through the pairs of a batch; each batch starts
//! from the cross-epoch carry, which is refreshed once per epoch.

mod optimizer;

pub use optimizer::{optimizer_step, Optimizer, OptimizerConfig, OptimizerKind};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentMode;
use crate::data::{Batch, MissingMask, MultimodalDataset, Split};
use crate::edm::{ContributionReport, Normalization, ETA};
use crate::error::{Error, Result};
use crate::inference::{evaluate, subset_table, transfer_on, Fusion, InferenceChain};
use crate::memory::{init_epoch_memory, update_carry_with_mean};
use crate::model::{classify_on, encode_on, joint_loss_on, Method, Model, ModelConfig, ParamStore, ParamView};
use crate::numerics::{ParamId, Tape, Tensor, Var};
use crate::rng::{rng_for, Stream};

/// How the modality order is chosen each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    /// Re-rank by contribution deficit after every epoch.
    #[default]
    Edm,
    /// Ascending generation informativeness, fixed.
    W2s,
    /// Descending generation informativeness, fixed.
    S2w,
    /// A fresh random permutation every epoch.
    Random,
    /// `initial_order`, fixed.
    Given,
}

impl OrderPolicy {
    pub fn name(self) -> &'static str {
        match self {
            OrderPolicy::Edm => "edm",
            OrderPolicy::W2s => "w2s",
            OrderPolicy::S2w => "s2w",
            OrderPolicy::Random => "random",
            OrderPolicy::Given => "given",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub mode: Method,
    #[serde(default)]
    pub order: OrderPolicy,
    /// First-epoch order (identity when absent); required for `given`.
    #[serde(default)]
    pub initial_order: Option<Vec<usize>>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Update the shared head in step 2 as well as step 1.
    #[serde(default = "default_true")]
    pub update_head_both_steps: bool,
    /// Weight of the strong modality's own unimodal loss, added to the fused
    /// loss in step 2 (0 disables it).
    #[serde(default = "default_unimodal_weight")]
    pub step2_unimodal_weight: f64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    150
}

fn default_batch_size() -> usize {
    64
}

fn default_true() -> bool {
    true
}

fn default_unimodal_weight() -> f64 {
    0.5
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: Method::default(),
            order: OrderPolicy::default(),
            initial_order: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            optimizer: OptimizerConfig::default(),
            update_head_both_steps: true,
            step2_unimodal_weight: default_unimodal_weight(),
            normalization: Normalization::default(),
            seed: 0,
        }
    }
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    sorted == (0..n).collect::<Vec<_>>()
}

impl TrainingConfig {
    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if !(self.step2_unimodal_weight.is_finite() && self.step2_unimodal_weight >= 0.0) {
            return Err(Error::config("training.step2_unimodal_weight", "must be finite and non-negative"));
        }
        if self.mode == Method::Ours && n_modalities < 2 {
            return Err(Error::config("data.dims", "alternating training needs at least two modalities"));
        }
        match &self.initial_order {
            Some(order) if !is_permutation(order, n_modalities) => {
                return Err(Error::config(
                    "training.initial_order",
                    format!("{order:?} is not a permutation of 0..{n_modalities}"),
                ))
            }
            None if self.order == OrderPolicy::Given => {
                return Err(Error::config("training.initial_order", "required by the `given` order policy"))
            }
            _ => {}
        }
        self.optimizer.validate()
    }
}

/// Mean loss of one sub-step kind over an epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstepLoss {
    pub label: String,
    pub modality: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Order used during this epoch.
    pub order: Vec<usize>,
    pub substeps: Vec<SubstepLoss>,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Mean gate score over the epoch (gate alignment only).
    pub gate_score: Option<f64>,
    pub report: ContributionReport,
    /// Order for the next epoch.
    pub next_order: Vec<usize>,
}

/// One optimizer step, as seen by a [`SubstepObserver`].
pub struct SubstepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub label: &'a str,
    pub declared: &'a BTreeSet<ParamId>,
    pub before: &'a ParamStore,
    pub after: &'a ParamStore,
}

pub trait SubstepObserver {
    fn on_substep(&mut self, event: &SubstepEvent);
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub priority: Vec<usize>,
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
    shuffle_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
}

/// Modalities sorted by ascending informativeness (lower index on ties).
pub fn weak_to_strong(informativeness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..informativeness.len()).collect();
    order.sort_by(|&a, &b| informativeness[a].total_cmp(&informativeness[b]).then(a.cmp(&b)));
    order
}

/// Modalities sorted by descending informativeness (lower index on ties).
pub fn strong_to_weak(informativeness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..informativeness.len()).collect();
    order.sort_by(|&a, &b| informativeness[b].total_cmp(&informativeness[a]).then(a.cmp(&b)));
    order
}

impl TrainState {
    pub fn new(model: Model, config: &TrainingConfig, informativeness: &[f64]) -> Result<Self> {
        let n = model.n_modalities();
        config.validate(n)?;
        if informativeness.len() != n {
            return Err(Error::config("data.informativeness", "length differs from the modality count"));
        }
        let mut order_rng = rng_for(config.seed, Stream::Order);
        let priority = match config.order {
            OrderPolicy::W2s => weak_to_strong(informativeness),
            OrderPolicy::S2w => strong_to_weak(informativeness),
            OrderPolicy::Random => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut order_rng);
                order
            }
            OrderPolicy::Edm | OrderPolicy::Given => config.initial_order.clone().unwrap_or_else(|| (0..n).collect()),
        };
        Ok(TrainState {
            model,
            optimizer: Optimizer::new(config.optimizer.clone()),
            priority,
            epoch: 0,
            log: Vec::new(),
            shuffle_rng: rng_for(config.seed, Stream::Shuffle),
            order_rng,
        })
    }
}

struct StepRunner<'a, 'o> {
    epoch: usize,
    batch: usize,
    observer: Option<&'a mut (dyn SubstepObserver + 'o)>,
}

impl StepRunner<'_, '_> {
    /// Build the loss with only `live` recorded as parameters, backpropagate
    /// and update exactly `live`. `forward` returns the loss and an optional
    /// payload extracted from the tape.
    fn step<T>(
        &mut self,
        state: &mut TrainState,
        label: &str,
        live: &BTreeSet<ParamId>,
        forward: impl FnOnce(&mut Tape, &ParamView) -> Result<(Var, T)>,
    ) -> Result<(f64, T)> {
        let mut tape = Tape::new();
        let (loss, payload) = {
            let view = ParamView::only(&state.model.store, live);
            forward(&mut tape, &view)?
        };
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let before = self.observer.as_ref().map(|_| state.model.store.clone());
        state.optimizer.step(&mut state.model.store, &grads, live)?;
        if let (Some(obs), Some(before)) = (self.observer.as_deref_mut(), before.as_ref()) {
            obs.on_substep(&SubstepEvent {
                epoch: self.epoch,
                batch: self.batch,
                label,
                declared: live,
                before,
                after: &state.model.store,
            });
        }
        Ok((value, payload))
    }
}

fn ids(groups: &[&[ParamId]]) -> BTreeSet<ParamId> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

struct LossAccumulator {
    labels: Vec<(String, usize)>,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl LossAccumulator {
    fn new() -> Self {
        LossAccumulator {
            labels: Vec::new(),
            sums: Vec::new(),
            counts: Vec::new(),
        }
    }

    fn add(&mut self, label: &str, modality: usize, loss: f64) {
        let pos = match self.labels.iter().position(|(l, _)| l == label) {
            Some(p) => p,
            None => {
                self.labels.push((label.to_string(), modality));
                self.sums.push(0.0);
                self.counts.push(0);
                self.labels.len() - 1
            }
        };
        self.sums[pos] += loss;
        self.counts[pos] += 1;
    }

    fn finish(self) -> (Vec<SubstepLoss>, f64) {
        let substeps: Vec<SubstepLoss> = self
            .labels
            .into_iter()
            .zip(self.sums.iter().zip(&self.counts))
            .map(|((label, modality), (&s, &c))| SubstepLoss {
                label,
                modality,
                mean_loss: s / c as f64,
            })
            .collect();
        let total = substeps.iter().map(|s| s.mean_loss).sum::<f64>() / substeps.len().max(1) as f64;
        (substeps, total)
    }
}

/// Batches of the training split in a fresh random order.
fn epoch_batches(state: &mut TrainState, dataset: &MultimodalDataset, batch_size: usize) -> Result<Vec<Batch>> {
    let mut idx = dataset.splits.train.clone();
    idx.shuffle(&mut state.shuffle_rng);
    idx.chunks(batch_size).map(|c| dataset.batch(c)).collect()
}

/// Losses of one epoch, before evaluation.
pub struct EpochOutcome {
    pub substeps: Vec<SubstepLoss>,
    pub train_loss: f64,
    pub gate_score: Option<f64>,
}

/// Running state of the chain inside one batch.
struct ChainContext {
    /// Encoded features of the previous modality.
    x: Tensor,
    /// Fused representation carried out of the previous modality.
    h: Tensor,
    /// Context before the previous modality was fused in (for recomputing it).
    c_before: Tensor,
}

fn alternating_batch(
    state: &mut TrainState,
    runner: &mut StepRunner,
    config: &TrainingConfig,
    batch: &Batch,
    losses: &mut LossAccumulator,
    gate_scores: &mut Vec<f64>,
) -> Result<Tensor> {
    let order = state.priority.clone();
    let fusion = Fusion::of(&state.model);
    let head = state.model.head;
    let encoders = state.model.encoders.clone();
    let mut step2_groups: Vec<ParamId> = fusion.memory.ids().to_vec();
    if fusion.alignment == AlignmentMode::Gate {
        step2_groups.extend(fusion.gate.ids());
    }
    if config.update_head_both_steps {
        step2_groups.extend(head.ids());
    }
    let unimodal_weight = config.step2_unimodal_weight;
    let c0 = init_epoch_memory(&state.model.memory_state, batch.len());
    let mut prev: Option<ChainContext> = None;
    let mut c_final = c0.clone();

    for (k, pair) in order.windows(2).enumerate() {
        let (i, j) = (pair[0], pair[1]);

        // Step 1: the weak side of the pair.
        let live = ids(&[&encoders[i].ids(), &head.ids()]);
        let label = format!("pair{k}.step1");
        let context = prev.take();
        let (loss, (x_i, h_i, c_i)) = runner.step(state, &label, &live, |tape, view| {
            let raw = tape.constant(batch.features[i].clone())?;
            let x = encode_on(tape, view, &encoders[i], raw)?;
            let (h, c) = match &context {
                None => (x, tape.constant(c0.clone())?),
                Some(p) => {
                    let x_src = tape.constant(p.x.clone())?;
                    let h_src = tape.constant(p.h.clone())?;
                    let c_prev = tape.constant(p.c_before.clone())?;
                    let (h, c, _) = transfer_on(tape, view, &fusion, x_src, h_src, x, c_prev)?;
                    (h, c)
                }
            };
            let logits = classify_on(tape, view, &head, h)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            Ok((loss, (tape.value(x).clone(), tape.value(h).clone(), tape.value(c).clone())))
        })?;
        losses.add(&label, i, loss);

        // Step 2: the strong side, guided by the detached weak state.
        let mut live: BTreeSet<ParamId> = step2_groups.iter().copied().collect();
        live.extend(encoders[j].ids());
        let label = format!("pair{k}.step2");
        let (loss, (x_j, h_j, c_j, score)) = runner.step(state, &label, &live, |tape, view| {
            let raw = tape.constant(batch.features[j].clone())?;
            let x = encode_on(tape, view, &encoders[j], raw)?;
            let x_src = tape.constant(x_i)?;
            let h_src = tape.constant(h_i)?;
            let c_prev = tape.constant(c_i.clone())?;
            let (h, c, score) = transfer_on(tape, view, &fusion, x_src, h_src, x, c_prev)?;
            let logits = classify_on(tape, view, &head, h)?;
            let mut loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            if unimodal_weight != 0.0 {
                let own = classify_on(tape, view, &head, x)?;
                let own = tape.softmax_cross_entropy(own, &batch.labels)?;
                let own = tape.scale(own, unimodal_weight)?;
                loss = tape.add(loss, own)?;
            }
            Ok((loss, (tape.value(x).clone(), tape.value(h).clone(), tape.value(c).clone(), score)))
        })?;
        losses.add(&label, j, loss);
        gate_scores.extend(score);
        c_final = c_j.clone();
        prev = Some(ChainContext {
            x: x_j,
            h: h_j,
            c_before: c_i,
        });
    }
    Ok(c_final)
}

fn abort(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| {
        if e.is_numeric() {
            Error::Aborted {
                epoch,
                batch,
                message: e.to_string(),
            }
        } else {
            e
        }
    }
}

/// One epoch of contribution-guided alternating training.
pub fn alternating_epoch(
    state: &mut TrainState,
    dataset: &MultimodalDataset,
    config: &TrainingConfig,
    mut observer: Option<&mut (dyn SubstepObserver + '_)>,
) -> Result<EpochOutcome> {
    if state.model.n_modalities() < 2 {
        return Err(Error::config("data.dims", "alternating training needs at least two modalities"));
    }
    let epoch = state.epoch;
    let batches = epoch_batches(state, dataset, config.batch_size)?;
    let mut losses = LossAccumulator::new();
    let mut gate_scores = Vec::new();
    let d = state.model.d_feat();
    let mut c_sum = vec![0.0; d];
    let mut seen = 0usize;
    for (bi, batch) in batches.iter().enumerate() {
        let mut runner = StepRunner {
            epoch,
            batch: bi,
            observer: observer.as_deref_mut(),
        };
        let c_final = alternating_batch(state, &mut runner, config, batch, &mut losses, &mut gate_scores)
            .map_err(abort(epoch, bi))?;
        for r in 0..d {
            c_sum[r] += (0..c_final.cols()).map(|q| c_final.get(r, q)).sum::<f64>();
        }
        seen += batch.len();
    }
    let mean: Vec<f64> = c_sum.iter().map(|s| s / seen as f64).collect();
    state.model.memory_state = update_carry_with_mean(&state.model.memory_state, &mean)?;
    let (substeps, train_loss) = losses.finish();
    let gate_score = (!gate_scores.is_empty()).then(|| gate_scores.iter().sum::<f64>() / gate_scores.len() as f64);
    Ok(EpochOutcome {
        substeps,
        train_loss,
        gate_score,
    })
}

/// One epoch of the concat-fusion joint baseline: one step per batch.
pub fn joint_epoch(
    state: &mut TrainState,
    dataset: &MultimodalDataset,
    config: &TrainingConfig,
    mut observer: Option<&mut (dyn SubstepObserver + '_)>,
) -> Result<EpochOutcome> {
    let epoch = state.epoch;
    let batches = epoch_batches(state, dataset, config.batch_size)?;
    let mut groups: Vec<ParamId> = state.model.encoders.iter().flat_map(|e| e.ids()).collect();
    groups.extend(state.model.concat_head.ids());
    let live: BTreeSet<ParamId> = groups.into_iter().collect();
    let mut losses = LossAccumulator::new();
    let encoders = state.model.encoders.clone();
    let head = state.model.concat_head;
    for (bi, batch) in batches.iter().enumerate() {
        let mut runner = StepRunner {
            epoch,
            batch: bi,
            observer: observer.as_deref_mut(),
        };
        let (loss, ()) = runner
            .step(state, "joint", &live, |tape, view| {
                let inputs = batch.features.iter().map(|f| tape.constant(f.clone())).collect::<Result<Vec<_>>>()?;
                let loss = joint_loss_on(tape, view, &encoders, &head, &inputs, &batch.labels)?;
                Ok((loss, ()))
            })
            .map_err(abort(epoch, bi))?;
        losses.add("joint", 0, loss);
    }
    let (substeps, train_loss) = losses.finish();
    Ok(EpochOutcome {
        substeps,
        train_loss,
        gate_score: None,
    })
}

/// Unimodal steps on a shared head (plain alternating) or on per-modality
/// heads (late fusion), one step per modality per batch.
fn unimodal_epoch(
    state: &mut TrainState,
    dataset: &MultimodalDataset,
    config: &TrainingConfig,
    shared_head: bool,
    mut observer: Option<&mut (dyn SubstepObserver + '_)>,
) -> Result<EpochOutcome> {
    let epoch = state.epoch;
    let batches = epoch_batches(state, dataset, config.batch_size)?;
    let order = if shared_head { state.priority.clone() } else { (0..state.model.n_modalities()).collect() };
    let mut losses = LossAccumulator::new();
    for (bi, batch) in batches.iter().enumerate() {
        let mut runner = StepRunner {
            epoch,
            batch: bi,
            observer: observer.as_deref_mut(),
        };
        for &i in &order {
            let enc = state.model.encoders[i];
            let head = if shared_head { state.model.head } else { state.model.unimodal_heads[i] };
            let live = ids(&[&enc.ids(), &head.ids()]);
            let label = format!("modality{i}");
            let raw = batch.features[i].clone();
            let (loss, ()) = runner
                .step(state, &label, &live, |tape, view| {
                    let x = tape.constant(raw)?;
                    let h = encode_on(tape, view, &enc, x)?;
                    let logits = classify_on(tape, view, &head, h)?;
                    Ok((tape.softmax_cross_entropy(logits, &batch.labels)?, ()))
                })
                .map_err(abort(epoch, bi))?;
            losses.add(&label, i, loss);
        }
    }
    let (substeps, train_loss) = losses.finish();
    Ok(EpochOutcome {
        substeps,
        train_loss,
        gate_score: None,
    })
}

/// Evaluate on the validation split, build the contribution report and pick
/// the next epoch's order.
pub fn reschedule(
    state: &mut TrainState,
    dataset: &MultimodalDataset,
    config: &TrainingConfig,
    outcome: EpochOutcome,
) -> Result<EpochRecord> {
    let val = dataset.split_batch(Split::Val)?;
    let chain = InferenceChain {
        order: state.priority.clone(),
        ..InferenceChain::for_model(&state.model, config.batch_size)
    };
    let method = config.mode;
    let eval = evaluate(&state.model, method, &val, &MissingMask::all_present(dataset.n_modalities(), val.len()), &chain)?;
    let table = subset_table(&state.model, method, &val, &chain)?;
    let report = ContributionReport::from_table(&table, config.normalization, ETA, &state.priority)?;
    let used = state.priority.clone();
    let next = match config.order {
        OrderPolicy::Edm => report.priority.clone(),
        OrderPolicy::Random => {
            let mut order = used.clone();
            order.sort_unstable();
            order.shuffle(&mut state.order_rng);
            order
        }
        OrderPolicy::W2s | OrderPolicy::S2w | OrderPolicy::Given => used.clone(),
    };
    let record = EpochRecord {
        epoch: state.epoch,
        order: used,
        substeps: outcome.substeps,
        train_loss: outcome.train_loss,
        val_accuracy: eval.accuracy,
        val_loss: eval.loss,
        gate_score: outcome.gate_score,
        report,
        next_order: next.clone(),
    };
    state.log.push(record.clone());
    state.priority = next;
    state.epoch += 1;
    Ok(record)
}

/// The optimizer steps of one epoch of the configured method.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &MultimodalDataset,
    config: &TrainingConfig,
    observer: Option<&mut (dyn SubstepObserver + '_)>,
) -> Result<EpochOutcome> {
    match config.mode {
        Method::Ours => alternating_epoch(state, dataset, config, observer),
        Method::Joint => joint_epoch(state, dataset, config, observer),
        Method::AltPlain => unimodal_epoch(state, dataset, config, true, observer),
        Method::LateFusion => unimodal_epoch(state, dataset, config, false, observer),
    }
}

/// [`train_epoch`] followed by [`reschedule`].
pub fn run_epoch(
    state: &mut TrainState,
    dataset: &MultimodalDataset,
    config: &TrainingConfig,
    observer: Option<&mut (dyn SubstepObserver + '_)>,
) -> Result<EpochRecord> {
    let outcome = train_epoch(state, dataset, config, observer)?;
    reschedule(state, dataset, config, outcome)
}

/// The order a trained model should use at inference.
pub fn final_priority(state: &TrainState, config: &TrainingConfig) -> Vec<usize> {
    match (config.order, state.log.last()) {
        (OrderPolicy::Random, Some(last)) => last.order.clone(),
        (_, Some(last)) => last.next_order.clone(),
        (_, None) => state.priority.clone(),
    }
}

/// The trained model and its append-only epoch log.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Train from scratch. `on_epoch` sees every record as it is produced.
pub fn train(
    dataset: &MultimodalDataset,
    model_config: &ModelConfig,
    config: &TrainingConfig,
    mut observer: Option<&mut (dyn SubstepObserver + '_)>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let model = Model::new(model_config, &dataset.dims(), dataset.n_classes, config.seed)?;
    let mut state = TrainState::new(model, config, &dataset.informativeness)?;
    for _ in 0..config.epochs {
        let record = run_epoch(&mut state, dataset, config, observer.as_deref_mut())?;
        on_epoch(&record);
    }
    state.model.priority = final_priority(&state, config);
    Ok(TrainOutcome {
        model: state.model,
        log: state.log,
    })
}

/// Records every sub-step whose changed parameters escape its declared set.
#[derive(Debug, Default)]
pub struct IsolationChecker {
    pub substeps: usize,
    pub violations: Vec<String>,
}

impl SubstepObserver for IsolationChecker {
    fn on_substep(&mut self, event: &SubstepEvent) {
        self.substeps += 1;
        let changed = event.after.changed_ids(event.before);
        let escaped: Vec<&str> = changed
            .difference(event.declared)
            .map(|&id| event.after.name(id))
            .collect();
        if !escaped.is_empty() {
            self.violations.push(format!(
                "epoch {} batch {} {}: {:?}",
                event.epoch, event.batch, event.label, escaped
            ));
        }
    }
}
