//! Memory-inherited weak-to-strong inference and the missing-modality
//! robustness evaluator.
//!
//! Samples are grouped by their presence pattern; each group walks the
//! priority order over its present modalities. The first present modality is
//! encoded directly and every later one is aligned against its predecessor
//! and folded in through the memory cell. Alignment correlates the columns
//! of the evaluation batch with each other, so predictions depend on which
//! samples share a batch (a batch of one makes alignment the identity).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{aligned_on, AlignmentMode, GateParams};
use crate::data::{Batch, MissingMask};
use crate::edm::SubsetPerformanceTable;
use crate::error::{Error, Result};
use crate::memory::{fuse_step_on, init_epoch_memory, MemoryCellParams};
use crate::model::{
    accuracy, argmax_rows, classify_on, encode_on, softmax_rows, Method, Model, ParamView,
};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryInit {
    #[default]
    Zero,
    Carry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceChain {
    pub order: Vec<usize>,
    pub memory_init: MemoryInit,
    pub batch_size: usize,
}

impl InferenceChain {
    /// The model's final priority with its configured memory policy.
    pub fn for_model(model: &Model, batch_size: usize) -> Self {
        InferenceChain {
            order: model.priority.clone(),
            memory_init: if model.config.inherit_carry { MemoryInit::Carry } else { MemoryInit::Zero },
            batch_size,
        }
    }

    pub fn initial_memory(&self, model: &Model, m: usize) -> Tensor {
        match self.memory_init {
            MemoryInit::Zero => Tensor::zeros(&[model.d_feat(), m]),
            MemoryInit::Carry => init_epoch_memory(&model.memory_state, m),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut sorted = self.order.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::config("priority", format!("{:?} is not a permutation of 0..{n}", self.order)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// What the memory chain needs besides encoders: the alignment rule and the
/// ids of the gate and memory-cell parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fusion {
    pub alignment: AlignmentMode,
    pub gate: GateParams,
    pub memory: MemoryCellParams,
}

impl Fusion {
    pub fn of(model: &Model) -> Self {
        Fusion {
            alignment: model.config.alignment,
            gate: model.gate,
            memory: model.memory,
        }
    }
}

/// Align `x_tgt` against `x_src`, then fuse it into `h_src` through the
/// memory cell. Returns `(H, c, gate score)`.
pub fn transfer_on(
    tape: &mut Tape,
    view: &ParamView,
    fusion: &Fusion,
    x_src: Var,
    h_src: Var,
    x_tgt: Var,
    c_prev: Var,
) -> Result<(Var, Var, Option<f64>)> {
    let (x_hat, score) = aligned_on(tape, view, &fusion.alignment, &fusion.gate, x_src, x_tgt)?;
    let (h, c) = fuse_step_on(tape, view, &fusion.memory, h_src, x_hat, c_prev)?;
    Ok((h, c, score))
}

/// Final fused representation of a chain over `inputs` (raw features in
/// chain order).
pub fn chain_forward_on(
    tape: &mut Tape,
    view: &ParamView,
    model: &Model,
    inputs: &[(usize, Var)],
    c0: Var,
) -> Result<Var> {
    let Some((&(head, x_head), rest)) = inputs.split_first() else {
        return Err(Error::config("mask", "chain has no present modality"));
    };
    let fusion = Fusion::of(model);
    let mut x_prev = encode_on(tape, view, &model.encoders[head], x_head)?;
    let mut h = x_prev;
    let mut c = c0;
    for &(k, raw) in rest {
        let x = encode_on(tape, view, &model.encoders[k], raw)?;
        (h, c, _) = transfer_on(tape, view, &fusion, x_prev, h, x, c)?;
        x_prev = x;
    }
    Ok(h)
}

/// Class distribution (`m × K`) for one batch whose samples all have the
/// modalities `present` (ascending order).
fn group_probabilities(model: &Model, method: Method, features: &[Tensor], present: &[usize], chain: &InferenceChain) -> Result<Tensor> {
    let m = features[present[0]].cols();
    let view = ParamView::frozen(&model.store);
    let mut tape = Tape::new();
    match method {
        Method::Ours => {
            let mut inputs = Vec::with_capacity(present.len());
            for &k in chain.order.iter().filter(|k| present.contains(k)) {
                inputs.push((k, tape.constant(features[k].clone())?));
            }
            let c0 = tape.constant(chain.initial_memory(model, m))?;
            let h = chain_forward_on(&mut tape, &view, model, &inputs, c0)?;
            let logits = classify_on(&mut tape, &view, &model.head, h)?;
            Ok(softmax_rows(tape.value(logits)))
        }
        Method::AltPlain | Method::LateFusion => {
            let mut total = Tensor::zeros(&[m, model.n_classes]);
            for &k in present {
                let x = tape.constant(features[k].clone())?;
                let h = encode_on(&mut tape, &view, &model.encoders[k], x)?;
                let head = if method == Method::AltPlain { &model.head } else { &model.unimodal_heads[k] };
                let logits = classify_on(&mut tape, &view, head, h)?;
                total.add_assign(&softmax_rows(tape.value(logits)))?;
            }
            Ok(total.scale(1.0 / present.len() as f64))
        }
        Method::Joint => {
            let mut parts = Vec::with_capacity(model.n_modalities());
            for k in 0..model.n_modalities() {
                if present.contains(&k) {
                    let x = tape.constant(features[k].clone())?;
                    parts.push(encode_on(&mut tape, &view, &model.encoders[k], x)?);
                } else {
                    parts.push(tape.constant(Tensor::zeros(&[model.d_feat(), m]))?);
                }
            }
            let fused = tape.concat_rows(&parts)?;
            let logits = classify_on(&mut tape, &view, &model.concat_head, fused)?;
            Ok(softmax_rows(tape.value(logits)))
        }
    }
}

/// Class distributions (`m × K`) for every sample of `batch` under `mask`.
pub fn infer_probabilities(model: &Model, method: Method, batch: &Batch, mask: &MissingMask, chain: &InferenceChain) -> Result<Tensor> {
    let n = model.n_modalities();
    let m = batch.len();
    chain.validate(n)?;
    if batch.n_modalities() != n || mask.n_modalities() != n || mask.n_samples() != m {
        return Err(Error::Dimension {
            op: "infer",
            left: vec![n, m],
            right: vec![mask.n_modalities(), mask.n_samples()],
        });
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for s in 0..m {
        if mask.present_modalities(s).next().is_none() {
            return Err(Error::EmptyChain(s));
        }
        groups.entry(mask.pattern(s)).or_default().push(s);
    }
    let k = model.n_classes;
    let mut out = Tensor::zeros(&[m, k]);
    for (pattern, members) in groups {
        let present: Vec<usize> = (0..n).filter(|i| pattern & (1 << i) != 0).collect();
        for chunk in members.chunks(chain.batch_size) {
            let features = batch
                .features
                .iter()
                .enumerate()
                .map(|(i, f)| if present.contains(&i) { f.select_columns(chunk) } else { Ok(Tensor::zeros(&[1, 1])) })
                .collect::<Result<Vec<_>>>()?;
            let probs = group_probabilities(model, method, &features, &present, chain)?;
            for (row, &s) in chunk.iter().enumerate() {
                out.data_mut()[s * k..(s + 1) * k].copy_from_slice(&probs.data()[row * k..(row + 1) * k]);
            }
        }
    }
    Ok(out)
}

pub fn infer(model: &Model, method: Method, batch: &Batch, mask: &MissingMask, chain: &InferenceChain) -> Result<Vec<usize>> {
    Ok(argmax_rows(&infer_probabilities(model, method, batch, mask, chain)?))
}

/// Accuracy (percent) and mean cross-entropy under `mask`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(model: &Model, method: Method, batch: &Batch, mask: &MissingMask, chain: &InferenceChain) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::config("split", "cannot evaluate an empty split"));
    }
    let probs = infer_probabilities(model, method, batch, mask, chain)?;
    let k = model.n_classes;
    let loss = batch
        .labels
        .iter()
        .enumerate()
        .map(|(s, &y)| -probs.data()[s * k + y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / batch.len() as f64;
    Ok(Evaluation {
        accuracy: accuracy(&argmax_rows(&probs), &batch.labels),
        loss,
    })
}

/// Accuracy of always predicting the most frequent label (lowest on ties).
pub fn majority_accuracy(labels: &[usize], n_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("split", "cannot evaluate an empty split"));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(100.0 * best as f64 / labels.len() as f64)
}

/// Accuracy using only the modalities in `subset`; the empty subset scores
/// the majority baseline.
pub fn subset_performance(model: &Model, method: Method, batch: &Batch, subset: &[usize], chain: &InferenceChain) -> Result<f64> {
    if subset.is_empty() {
        return majority_accuracy(&batch.labels, model.n_classes);
    }
    if batch.is_empty() {
        return Err(Error::config("split", "cannot evaluate an empty split"));
    }
    let mask = MissingMask::only(subset, model.n_modalities(), batch.len())?;
    Ok(accuracy(&infer(model, method, batch, &mask, chain)?, &batch.labels))
}

pub fn subset_table(model: &Model, method: Method, batch: &Batch, chain: &InferenceChain) -> Result<SubsetPerformanceTable> {
    SubsetPerformanceTable::from_fn(model.n_modalities(), |subset| subset_performance(model, method, batch, subset, chain))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub rate: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
}

/// Mean and sample standard deviation of accuracy over mask seeds, per rate.
pub fn robustness_sweep(
    model: &Model,
    method: Method,
    batch: &Batch,
    rates: &[f64],
    seeds: &[u64],
    chain: &InferenceChain,
) -> Result<Vec<RobustnessRow>> {
    if seeds.is_empty() {
        return Err(Error::config("eval.robustness_seeds", "need at least one seed"));
    }
    rates
        .iter()
        .map(|&rate| {
            let accs = seeds
                .iter()
                .map(|&seed| {
                    let mask = MissingMask::sample(model.n_modalities(), batch.len(), rate, seed)?;
                    Ok(accuracy(&infer(model, method, batch, &mask, chain)?, &batch.labels))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&accs);
            Ok(RobustnessRow {
                rate,
                mean_acc: mean,
                std_acc: std,
                n_seeds: seeds.len(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("rate,mean_acc,std_acc,n_seeds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.rate, r.mean_acc, r.std_acc, r.n_seeds));
    }
    out
}
