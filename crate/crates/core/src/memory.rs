//! Gated cross-modal memory cell.
//!
//! ```text
//! z  = [H_i; X̂_j]
//! f  = σ(W_f z)   i = σ(W_i z)   o = σ(W_o z)   g̃ = tanh(W_g z)
//! c' = f ⊙ c + i ⊙ g̃
//! H_j = o ⊙ tanh(c')
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, ParamView};
use crate::numerics::{ParamId, Tape, Tensor, Var};

pub const DEFAULT_DECAY: f64 = 0.9;

/// Bias-free gate weights, each `d_feat × 2·d_feat`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryCellParams {
    pub w_f: ParamId,
    pub w_i: ParamId,
    pub w_o: ParamId,
    pub w_g: ParamId,
}

impl MemoryCellParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, d_feat: usize, rng: &mut R) -> Self {
        MemoryCellParams {
            w_f: store.add_weight("memory.w_f", d_feat, 2 * d_feat, rng),
            w_i: store.add_weight("memory.w_i", d_feat, 2 * d_feat, rng),
            w_o: store.add_weight("memory.w_o", d_feat, 2 * d_feat, rng),
            w_g: store.add_weight("memory.w_g", d_feat, 2 * d_feat, rng),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_f, self.w_i, self.w_o, self.w_g]
    }
}

/// One memory step on the tape. Returns `(H_j, c_new)`.
pub fn fuse_step_on(
    tape: &mut Tape,
    view: &ParamView,
    params: &MemoryCellParams,
    h_i: Var,
    x_aligned: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let (h, x, c) = (tape.try_value(h_i)?, tape.try_value(x_aligned)?, tape.try_value(c_prev)?);
    if h.shape() != x.shape() || h.shape() != c.shape() {
        return Err(Error::Dimension {
            op: "fuse_step",
            left: h.shape().to_vec(),
            right: if h.shape() != x.shape() { x.shape().to_vec() } else { c.shape().to_vec() },
        });
    }
    let z = tape.concat_rows(&[h_i, x_aligned])?;
    let gate = |tape: &mut Tape, id: ParamId| -> Result<Var> {
        let w = view.bind(tape, id)?;
        tape.matmul(w, z)
    };
    let f = gate(tape, params.w_f)?;
    let f = tape.sigmoid(f)?;
    let i = gate(tape, params.w_i)?;
    let i = tape.sigmoid(i)?;
    let o = gate(tape, params.w_o)?;
    let o = tape.sigmoid(o)?;
    let g = gate(tape, params.w_g)?;
    let g = tape.tanh(g)?;
    let kept = tape.mul(f, c_prev)?;
    let written = tape.mul(i, g)?;
    let c_new = tape.add(kept, written)?;
    let squashed = tape.tanh(c_new)?;
    let h_j = tape.mul(o, squashed)?;
    Ok((h_j, c_new))
}

/// Value-only [`fuse_step_on`].
pub fn fuse_step(
    h_i: &Tensor,
    x_aligned: &Tensor,
    c_prev: &Tensor,
    store: &ParamStore,
    params: &MemoryCellParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let view = ParamView::frozen(store);
    let h = tape.constant(h_i.clone())?;
    let x = tape.constant(x_aligned.clone())?;
    let c = tape.constant(c_prev.clone())?;
    let (h_j, c_new) = fuse_step_on(&mut tape, &view, params, h, x, c)?;
    Ok((tape.value(h_j).clone(), tape.value(c_new).clone()))
}

/// Cross-epoch memory: an exponential moving average of batch-mean context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub carry: Vec<f64>,
    pub ema_decay: f64,
}

impl MemoryState {
    pub fn new(d_feat: usize, ema_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::config("model.memory_decay", format!("{ema_decay} is outside [0, 1]")));
        }
        Ok(MemoryState {
            carry: vec![0.0; d_feat],
            ema_decay,
        })
    }

    pub fn d_feat(&self) -> usize {
        self.carry.len()
    }
}

/// `c₀` for a batch of `m` samples: the carry in every column.
pub fn init_epoch_memory(state: &MemoryState, m: usize) -> Tensor {
    Tensor::broadcast_columns(&state.carry, m)
}

pub fn update_carry(state: &MemoryState, c_final: &Tensor) -> Result<MemoryState> {
    update_carry_with_mean(state, &c_final.column_mean())
}

/// EMA update from an already averaged context vector.
pub fn update_carry_with_mean(state: &MemoryState, mean: &[f64]) -> Result<MemoryState> {
    if mean.len() != state.carry.len() {
        return Err(Error::Dimension {
            op: "update_carry",
            left: vec![state.carry.len()],
            right: vec![mean.len()],
        });
    }
    let d = state.ema_decay;
    let carry = state
        .carry
        .iter()
        .zip(mean)
        .map(|(&c, &v)| if d == 1.0 { c } else { d * c + (1.0 - d) * v })
        .collect();
    Ok(MemoryState {
        carry,
        ema_decay: d,
    })
}
