//! Per-modality encoders, classifier heads and the non-memory fusion baselines.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
pub use params::{ParamStore, ParamView};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentMode, GateParams};
use crate::error::{Error, Result};
use crate::memory::{MemoryCellParams, MemoryState, DEFAULT_DECAY};
use crate::numerics::{ParamId, Tape, Tensor, Var};
use crate::rng::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_feat")]
    pub d_feat: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub alignment: AlignmentMode,
    #[serde(default = "default_decay")]
    pub memory_decay: f64,
    /// Start inference from the training carry instead of zeros.
    #[serde(default)]
    pub inherit_carry: bool,
    #[serde(default = "default_gate_hidden")]
    pub gate_hidden: usize,
}

fn default_d_feat() -> usize {
    32
}

fn default_hidden() -> usize {
    64
}

fn default_decay() -> f64 {
    DEFAULT_DECAY
}

fn default_gate_hidden() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feat: default_d_feat(),
            hidden: default_hidden(),
            alignment: AlignmentMode::default(),
            memory_decay: default_decay(),
            inherit_carry: false,
            gate_hidden: default_gate_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 {
            return Err(Error::config("model.d_feat", "must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::config("model.hidden", "must be positive"));
        }
        if self.gate_hidden == 0 {
            return Err(Error::config("model.gate_hidden", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.memory_decay) {
            return Err(Error::config("model.memory_decay", "must lie in [0, 1]"));
        }
        self.alignment.validate().map_err(|e| match e {
            Error::Config { message, .. } => Error::config("model.alignment.tau", message),
            other => other,
        })
    }
}

/// Which trainer produced a model, and therefore how it predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Alternating training with alignment and memory.
    #[default]
    Ours,
    /// Concat fusion, one loss over every modality.
    Joint,
    /// Alternating unimodal updates on a shared head, no alignment or memory.
    AltPlain,
    /// Independent unimodal models averaged at prediction time.
    LateFusion,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Joint => "joint",
            Method::AltPlain => "alt-plain",
            Method::LateFusion => "late-fusion",
        }
    }
}

/// Two-layer MLP `dᵢ → hidden → d_feat`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_feat: usize, rng: &mut R) -> Self {
        EncoderParams {
            w1: store.add_weight(format!("{name}.w1"), hidden, d_in, rng),
            b1: store.add_zeros(format!("{name}.b1"), &[hidden, 1]),
            w2: store.add_weight(format!("{name}.w2"), d_feat, hidden, rng),
            b2: store.add_zeros(format!("{name}.b2"), &[d_feat, 1]),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Linear head `d_in → K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, k: usize, rng: &mut R) -> Self {
        ClassifierParams {
            w: store.add_weight(format!("{name}.w"), k, d_in, rng),
            b: store.add_zeros(format!("{name}.b"), &[k, 1]),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

fn check_input(tape: &Tape, store: &ParamStore, w: ParamId, x: Var, op: &'static str) -> Result<()> {
    let expected = store.get(w).cols();
    let got = tape.try_value(x)?;
    if got.rows() != expected {
        return Err(Error::Dimension {
            op,
            left: store.get(w).shape().to_vec(),
            right: got.shape().to_vec(),
        });
    }
    Ok(())
}

/// `relu(W₂·relu(W₁x + b₁) + b₂)`, one column per sample.
pub fn encode_on(tape: &mut Tape, view: &ParamView, enc: &EncoderParams, x: Var) -> Result<Var> {
    check_input(tape, view.store(), enc.w1, x, "encode")?;
    let w1 = view.bind(tape, enc.w1)?;
    let b1 = view.bind(tape, enc.b1)?;
    let w2 = view.bind(tape, enc.w2)?;
    let b2 = view.bind(tape, enc.b2)?;
    let h = tape.matmul(w1, x)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(w2, h)?;
    let o = tape.add_bias(o, b2)?;
    tape.relu(o)
}

/// Logits `m × K` for features `d × m`.
pub fn classify_on(tape: &mut Tape, view: &ParamView, head: &ClassifierParams, h: Var) -> Result<Var> {
    check_input(tape, view.store(), head.w, h, "classify")?;
    let w = view.bind(tape, head.w)?;
    let b = view.bind(tape, head.b)?;
    let z = tape.matmul(w, h)?;
    let z = tape.add_bias(z, b)?;
    tape.transpose(z)
}

pub fn encode(x: &Tensor, store: &ParamStore, enc: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = encode_on(&mut tape, &ParamView::frozen(store), enc, xv)?;
    Ok(tape.value(out).clone())
}

pub fn classify(h: &Tensor, store: &ParamStore, head: &ClassifierParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let out = classify_on(&mut tape, &ParamView::frozen(store), head, hv)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Sum,
    Concat,
}

pub fn fuse_baseline(kind: FusionKind, features: &[Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::config("features", "fusion needs at least one feature matrix"))?;
    match kind {
        FusionKind::Sum => features[1..].iter().try_fold(first.clone(), |acc, f| acc.add(f)),
        FusionKind::Concat => Tensor::concat_rows(&features.iter().collect::<Vec<_>>()),
    }
}

pub fn fuse_baseline_on(tape: &mut Tape, kind: FusionKind, features: &[Var]) -> Result<Var> {
    let (&first, rest) = features
        .split_first()
        .ok_or_else(|| Error::config("features", "fusion needs at least one feature matrix"))?;
    match kind {
        FusionKind::Sum => rest.iter().try_fold(first, |acc, &f| tape.add(acc, f)),
        FusionKind::Concat => tape.concat_rows(features),
    }
}

/// Row-wise softmax of `m × K` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let k = scores.cols();
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Average per-modality `m × K` distributions, then argmax.
pub fn late_fusion_predict(distributions: &[Tensor]) -> Result<Vec<usize>> {
    let first = distributions
        .first()
        .ok_or_else(|| Error::config("distributions", "need at least one distribution"))?;
    let mut total = first.clone();
    for d in &distributions[1..] {
        total.add_assign(d)?;
    }
    Ok(argmax_rows(&total.scale(1.0 / distributions.len() as f64)))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Every trainable tensor of one experiment plus the cross-epoch carry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Vec<usize>,
    pub n_classes: usize,
    pub store: ParamStore,
    pub encoders: Vec<EncoderParams>,
    /// Shared head `d_feat → K` used by the alternating trainers.
    pub head: ClassifierParams,
    /// `n·d_feat → K` head of the joint baseline.
    pub concat_head: ClassifierParams,
    /// Separate heads of the late-fusion baseline.
    pub unimodal_heads: Vec<ClassifierParams>,
    pub memory: MemoryCellParams,
    pub gate: GateParams,
    pub memory_state: MemoryState,
    /// Chain order used at inference.
    pub priority: Vec<usize>,
}

impl Model {
    pub fn new(config: &ModelConfig, dims: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.is_empty() {
            return Err(Error::config("data.dims", "at least one modality is required"));
        }
        let mut rng = rng_for(seed, Stream::Init);
        let mut store = ParamStore::new();
        let (d, h) = (config.d_feat, config.hidden);
        let encoders = dims
            .iter()
            .enumerate()
            .map(|(i, &di)| EncoderParams::init(&mut store, &format!("encoder{i}"), di, h, d, &mut rng))
            .collect();
        let head = ClassifierParams::init(&mut store, "head", d, n_classes, &mut rng);
        let concat_head = ClassifierParams::init(&mut store, "concat_head", d * dims.len(), n_classes, &mut rng);
        let unimodal_heads = (0..dims.len())
            .map(|i| ClassifierParams::init(&mut store, &format!("unimodal_head{i}"), d, n_classes, &mut rng))
            .collect();
        let memory = MemoryCellParams::init(&mut store, d, &mut rng);
        let gate = GateParams::init(&mut store, config.gate_hidden, &mut rng);
        Ok(Model {
            config: config.clone(),
            dims: dims.to_vec(),
            n_classes,
            store,
            encoders,
            head,
            concat_head,
            unimodal_heads,
            memory,
            gate,
            memory_state: MemoryState::new(d, config.memory_decay)?,
            priority: (0..dims.len()).collect(),
        })
    }

    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn d_feat(&self) -> usize {
        self.config.d_feat
    }
}

/// Concat-fusion cross-entropy over all modalities.
pub fn joint_loss_on(
    tape: &mut Tape,
    view: &ParamView,
    encoders: &[EncoderParams],
    head: &ClassifierParams,
    inputs: &[Var],
    labels: &[usize],
) -> Result<Var> {
    if inputs.len() != encoders.len() {
        return Err(Error::config("batch", "joint loss needs every modality present"));
    }
    let features = inputs
        .iter()
        .zip(encoders)
        .map(|(&x, enc)| encode_on(tape, view, enc, x))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_baseline_on(tape, FusionKind::Concat, &features)?;
    let logits = classify_on(tape, view, head, fused)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Value of [`joint_loss_on`] with every parameter frozen.
pub fn joint_loss(model: &Model, features: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let inputs = features.iter().map(|f| tape.constant(f.clone())).collect::<Result<Vec<_>>>()?;
    let view = ParamView::frozen(&model.store);
    let loss = joint_loss_on(&mut tape, &view, &model.encoders, &model.concat_head, &inputs, labels)?;
    Ok(tape.value(loss).data()[0])
}
