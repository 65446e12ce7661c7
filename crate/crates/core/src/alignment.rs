//! Sample-level cross-modal correlation and the aligned features built from it.
//!
//! For a weak source `Xi` and a stronger target `Xj` (both `d × m`), the
//! correlation `C[r, q] = cos(Xi[:, r], Xj[:, q])` is filtered (threshold or
//! learnable gate), its diagonal forced to 1, and the aligned target is
//! `Xj · C`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, ParamView};
use crate::numerics::{cosine_kernel, ParamId, Tape, Tensor, Var, ZERO_NORM};

pub const DEFAULT_TAU: f64 = 0.1;

/// Threshold grid `{0.0, 0.1, ..., 0.9}`.
pub fn default_tau_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum AlignmentMode {
    /// Keep entries strictly above `tau`.
    Threshold { tau: f64 },
    /// Scale the correlation by a learned score in (0, 1).
    Gate,
    /// No cross-sample mixing: `C = I`.
    #[serde(rename = "none")]
    Identity,
}

impl Default for AlignmentMode {
    fn default() -> Self {
        AlignmentMode::Threshold { tau: DEFAULT_TAU }
    }
}

impl AlignmentMode {
    pub fn validate(&self) -> Result<()> {
        if let AlignmentMode::Threshold { tau } = self {
            check_tau(*tau)?;
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::config("tau", format!("{tau} is outside [0, 1]")));
    }
    Ok(())
}

/// Square matrix of cross-modal cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix(Tensor);

impl CorrelationMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        let (r, c) = t.expect_matrix("correlation")?;
        if r != c {
            return Err(Error::Dimension {
                op: "correlation",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        Ok(CorrelationMatrix(t))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn get(&self, r: usize, q: usize) -> f64 {
        self.0.get(r, q)
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    /// Off-diagonal `(r, q)` positions holding a nonzero value.
    pub fn off_diagonal_support(&self) -> Vec<(usize, usize)> {
        let n = self.size();
        (0..n)
            .flat_map(|r| (0..n).map(move |q| (r, q)))
            .filter(|&(r, q)| r != q && self.get(r, q) != 0.0)
            .collect()
    }
}

fn zero_columns(x: &Tensor) -> usize {
    x.column_norms().iter().filter(|&&n| n <= ZERO_NORM).count()
}

fn note_zero_columns(xi: &Tensor, xj: &Tensor) {
    let zi = zero_columns(xi);
    let zj = zero_columns(xj);
    if zi + zj > 0 {
        log::debug!("correlation: {zi} source and {zj} target zero-norm columns mapped to zero");
    }
}

fn check_pair(xi: &Tensor, xj: &Tensor) -> Result<()> {
    xi.expect_matrix("correlation")?;
    if xi.shape() != xj.shape() {
        return Err(Error::Dimension {
            op: "correlation",
            left: xi.shape().to_vec(),
            right: xj.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn correlation(xi: &Tensor, xj: &Tensor) -> Result<CorrelationMatrix> {
    check_pair(xi, xj)?;
    note_zero_columns(xi, xj);
    let (c, ..) = cosine_kernel(xi, xj)?;
    CorrelationMatrix::new(c)
}

fn threshold_keep(c: &Tensor, tau: f64) -> Vec<bool> {
    c.data().iter().map(|&v| v > tau).collect()
}

/// Zero every entry `<= tau`, then set the diagonal to 1.
pub fn threshold_filter(c: &CorrelationMatrix, tau: f64) -> Result<CorrelationMatrix> {
    check_tau(tau)?;
    let mut out = c.0.clone();
    for (v, keep) in out.data_mut().iter_mut().zip(threshold_keep(&c.0, tau)) {
        if !keep {
            *v = 0.0;
        }
    }
    for i in 0..out.rows() {
        out.set(i, i, 1.0);
    }
    Ok(CorrelationMatrix(out))
}

/// `Xj · C`: column `q` becomes a correlation-weighted mix of `Xj` columns.
pub fn align(xj: &Tensor, c: &CorrelationMatrix) -> Result<Tensor> {
    xj.matmul(&c.0)
}

/// Two-layer scorer for the gate: `6 → hidden (tanh) → 1 (sigmoid)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const GATE_FEATURES: usize = 6;

impl GateParams {
    /// The output layer starts at zero so the initial score is exactly 0.5.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        GateParams {
            w1: store.add_weight("gate.w1", hidden, GATE_FEATURES, rng),
            b1: store.add_zeros("gate.b1", &[hidden, 1]),
            w2: store.add_zeros("gate.w2", &[1, hidden]),
            b2: store.add_zeros("gate.b2", &[1, 1]),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Batch-size independent summary fed to the gate: mean, max, diagonal mean
/// and positive fraction of `C`, then the mean column norms of both inputs.
pub fn gate_features(c: &CorrelationMatrix, xi: &Tensor, xj: &Tensor) -> Tensor {
    let t = &c.0;
    let n = t.rows();
    let diag_mean = (0..n).map(|i| t.get(i, i)).sum::<f64>() / n as f64;
    let positive = t.data().iter().filter(|&&v| v > 0.0).count() as f64 / t.len() as f64;
    let mean_norm = |x: &Tensor| {
        let norms = x.column_norms();
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    Tensor::column_vector(&[t.mean(), t.max(), diag_mean, positive, mean_norm(xi), mean_norm(xj)])
}

/// Gate score `g ∈ (0, 1)` recorded on `tape`.
pub fn gate_score_on(tape: &mut Tape, view: &ParamView, gate: &GateParams, features: Tensor) -> Result<Var> {
    let f = tape.constant(features)?;
    let w1 = view.bind(tape, gate.w1)?;
    let b1 = view.bind(tape, gate.b1)?;
    let w2 = view.bind(tape, gate.w2)?;
    let b2 = view.bind(tape, gate.b2)?;
    let h = tape.matmul(w1, f)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(w2, h)?;
    let o = tape.add_bias(o, b2)?;
    tape.sigmoid(o)
}

/// `g · C` with the diagonal restored to 1, plus the score `g`.
pub fn learnable_gate(
    c: &CorrelationMatrix,
    xi: &Tensor,
    xj: &Tensor,
    store: &ParamStore,
    gate: &GateParams,
) -> Result<(CorrelationMatrix, f64)> {
    let mut tape = Tape::new();
    let view = ParamView::frozen(store);
    let g = gate_score_on(&mut tape, &view, gate, gate_features(c, xi, xj))?;
    let score = tape.value(g).data()[0];
    let mut out = c.0.scale(score);
    for i in 0..out.rows() {
        out.set(i, i, 1.0);
    }
    Ok((CorrelationMatrix(out), score))
}

/// Build `X̂j` on the tape from a source `xi` and target `xj` according to
/// `mode`. Returns the aligned features and, in gate mode, the score.
pub fn aligned_on(
    tape: &mut Tape,
    view: &ParamView,
    mode: &AlignmentMode,
    gate: &GateParams,
    xi: Var,
    xj: Var,
) -> Result<(Var, Option<f64>)> {
    check_pair(tape.try_value(xi)?, tape.try_value(xj)?)?;
    if let AlignmentMode::Identity = mode {
        return Ok((xj, None));
    }
    note_zero_columns(tape.value(xi), tape.value(xj));
    let c = tape.cosine(xi, xj)?;
    match mode {
        AlignmentMode::Threshold { tau } => {
            check_tau(*tau)?;
            let keep = threshold_keep(tape.value(c), *tau);
            let kept = tape.mask(c, keep)?;
            let filtered = tape.fill_diagonal_ones(kept)?;
            Ok((tape.matmul(xj, filtered)?, None))
        }
        AlignmentMode::Gate => {
            let corr = CorrelationMatrix(tape.value(c).clone());
            let features = gate_features(&corr, tape.value(xi), tape.value(xj));
            let g = gate_score_on(tape, view, gate, features)?;
            let score = tape.value(g).data()[0];
            let scaled = tape.scale_by(g, c)?;
            let gated = tape.fill_diagonal_ones(scaled)?;
            Ok((tape.matmul(xj, gated)?, Some(score)))
        }
        AlignmentMode::Identity => unreachable!(),
    }
}
