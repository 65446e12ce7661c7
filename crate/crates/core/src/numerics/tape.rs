//! Reverse-mode differentiation over a linear record of operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are either
//! constants or parameters tagged with a [`ParamId`]; calling
//! [`Tape::backward`] walks the record from the last node to the first and
//! accumulates one gradient per parameter id.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::{sigmoid, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Stable identifier of a trainable tensor inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Elementwise activation of a plain tensor.
pub fn pointwise(op: Activation, x: &Tensor) -> Tensor {
    x.map(|v| op.apply(v))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, with
/// `logits` laid out `m × K`. Also returns the row-wise probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (m, k) = logits.expect_matrix("softmax_cross_entropy")?;
    if labels.len() != m {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut probs = vec![0.0; m * k];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label {
                index: i,
                label,
                classes: k,
            });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= z;
        }
        loss -= row[label] - max - z.ln();
    }
    Ok((loss / m as f64, Tensor::new(vec![m, k], probs)?))
}

/// Cosine matrix, normalized `a`, normalized `b`, column norms of `a` and `b`.
type CosineParts = (Tensor, Tensor, Tensor, Vec<f64>, Vec<f64>);

/// Cosine similarity between every column of `a` and every column of `b`;
/// entry `(r, q)` compares `a[:, r]` with `b[:, q]`. Zero-norm columns
/// produce zero rows/columns. Also returns the normalized inputs and norms
/// for reuse by the backward pass.
pub(crate) fn cosine_kernel(a: &Tensor, b: &Tensor) -> Result<CosineParts> {
    a.expect_matrix("cosine")?;
    b.expect_matrix("cosine")?;
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "cosine",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let normalize = |t: &Tensor| -> (Tensor, Vec<f64>) {
        let norms = t.column_norms();
        let c = t.cols();
        let mut out = t.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let n = norms[idx % c];
            *v = if n > ZERO_NORM { *v / n } else { 0.0 };
        }
        (out, norms)
    };
    let (a_hat, a_norms) = normalize(a);
    let (b_hat, b_norms) = normalize(b);
    let c = a_hat.transpose()?.matmul(&b_hat)?.map(|v| v.clamp(-1.0, 1.0));
    Ok((c, a_hat, b_hat, a_norms, b_norms))
}

/// Columns with a norm at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy { scalar: usize, x: usize },
    AddBias { x: usize, bias: usize },
    Pointwise(Activation, usize),
    ConcatRows(Vec<usize>),
    Cosine {
        a: usize,
        b: usize,
        a_hat: Tensor,
        b_hat: Tensor,
        a_norms: Vec<f64>,
        b_norms: Vec<f64>,
    },
    Mask { x: usize, keep: Vec<bool> },
    FillDiagonal(usize),
    Sum(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddBias { .. } => "add_bias",
            Op::Pointwise(..) => "pointwise",
            Op::ConcatRows(_) => "concat_rows",
            Op::Cosine { .. } => "cosine",
            Op::Mask { .. } => "mask",
            Op::FillDiagonal(_) => "fill_diagonal",
            Op::Sum(_) => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Pointwise(_, x)
            | Op::FillDiagonal(x)
            | Op::Sum(x) => vec![*x],
            Op::ScaleBy { scalar, x } => vec![*scalar, *x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Mask { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient of `id`, or zeros of `shape` when the parameter was not
    /// reachable from the loss.
    pub fn get_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor {
        self.grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<ParamId>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite value", op.name())));
        }
        let requires_grad = param.is_some() || op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, None)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(out, Op::MatMul(ia, ib), None)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.transpose()?;
        self.push(out, Op::Transpose(ix), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        self.push(out, Op::Add(ia, ib), None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        self.push(out, Op::Sub(ia, ib), None)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        self.push(out, Op::Mul(ia, ib), None)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.scale(s);
        self.push(out, Op::Scale(ix, s), None)
    }

    /// Multiply a tensor by a recorded `1 × 1` scalar.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        let (is, ix) = (self.idx(scalar)?, self.idx(x)?);
        let sv = &self.nodes[is].value;
        if sv.len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                left: sv.shape().to_vec(),
                right: self.nodes[ix].value.shape().to_vec(),
            });
        }
        let s = sv.data()[0];
        let out = self.nodes[ix].value.scale(s);
        self.push(out, Op::ScaleBy { scalar: is, x: ix }, None)
    }

    /// Add an `r × 1` bias to every column of an `r × m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let bv = &self.nodes[ib].value;
        let (r, m) = xv.expect_matrix("add_bias")?;
        if bv.shape() != [r, 1] {
            return Err(Error::Dimension {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[k / m];
        }
        self.push(out, Op::AddBias { x: ix, bias: ib }, None)
    }

    pub fn pointwise(&mut self, op: Activation, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = pointwise(op, &self.nodes[ix].value);
        self.push(out, Op::Pointwise(op, ix), None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Activation::Relu, x)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::concat_rows(&values)?;
        self.push(out, Op::ConcatRows(idx), None)
    }

    /// Column-wise cosine similarity matrix `(a.cols × b.cols)`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (c, a_hat, b_hat, a_norms, b_norms) = cosine_kernel(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(
            c,
            Op::Cosine {
                a: ia,
                b: ib,
                a_hat,
                b_hat,
                a_norms,
                b_norms,
            },
            None,
        )
    }

    /// Zero every entry whose `keep` flag is false.
    pub fn mask(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if keep.len() != xv.len() {
            return Err(Error::Dimension {
                op: "mask",
                left: xv.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let mut out = xv.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
            if !k {
                *v = 0.0;
            }
        }
        self.push(out, Op::Mask { x: ix, keep }, None)
    }

    /// Overwrite the diagonal of a square matrix with ones.
    pub fn fill_diagonal_ones(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (r, c) = xv.expect_matrix("fill_diagonal")?;
        if r != c {
            return Err(Error::Dimension {
                op: "fill_diagonal",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let mut out = xv.clone();
        for i in 0..r {
            out.set(i, i, 1.0);
        }
        self.push(out, Op::FillDiagonal(ix), None)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(ix), None)
    }

    /// Mean cross-entropy of `m × K` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (loss, probs) = softmax_cross_entropy(&self.nodes[il].value, labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            None,
        )
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_traced(loss).map(|(g, _)| g)
    }

    /// Like [`Tape::backward`], additionally returning the indices of the
    /// operation nodes in the order they were visited.
    pub fn backward_traced(&self, loss: Var) -> Result<(Gradients, Vec<usize>)> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Tensor::ones(self.nodes[root].value.shape()));
        let mut params = Gradients::default();
        let mut visited = Vec::new();

        for i in (0..=root).rev() {
            let Some(upstream) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                match params.grads.get_mut(&pid) {
                    Some(g) => g.add_assign(&upstream)?,
                    None => {
                        params.grads.insert(pid, upstream.clone());
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            visited.push(i);
            for (input, grad) in self.local_grads(node, &upstream)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok((params, visited))
    }

    fn local_grads(&self, node: &Node, dy: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, dy.matmul(&val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(dy)?),
            ],
            Op::Transpose(x) => vec![(*x, dy.transpose()?)],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, dy.mul(val(*b))?), (*b, dy.mul(val(*a))?)],
            Op::Scale(x, s) => vec![(*x, dy.scale(*s))],
            Op::ScaleBy { scalar, x } => {
                let s = val(*scalar).data()[0];
                let ds = dy.mul(val(*x))?.sum();
                vec![
                    (*scalar, Tensor::full(val(*scalar).shape(), ds)),
                    (*x, dy.scale(s)),
                ]
            }
            Op::AddBias { x, bias } => {
                let c = dy.cols();
                let sums: Vec<f64> = dy.data().chunks(c).map(|row| row.iter().sum()).collect();
                vec![(*x, dy.clone()), (*bias, Tensor::column_vector(&sums))]
            }
            Op::Pointwise(act, x) => {
                let y = &node.value;
                let g = match act {
                    Activation::Sigmoid => y.zip_map(dy, "sigmoid'", |y, d| d * y * (1.0 - y))?,
                    Activation::Tanh => y.zip_map(dy, "tanh'", |y, d| d * (1.0 - y * y))?,
                    Activation::Relu => val(*x).zip_map(dy, "relu'", |x, d| if x > 0.0 { d } else { 0.0 })?,
                };
                vec![(*x, g)]
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for &p in parts {
                    let r = val(p).rows();
                    let slice = dy.data()[offset * c..(offset + r) * c].to_vec();
                    grads.push((p, Tensor::new(vec![r, c], slice)?));
                    offset += r;
                }
                grads
            }
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norms,
                b_norms,
            } => {
                // C = Âᵀ B̂ ; dÂ = B̂ dCᵀ, dB̂ = Â dC, then back through column normalization.
                let d_ahat = b_hat.matmul(&dy.transpose()?)?;
                let d_bhat = a_hat.matmul(dy)?;
                vec![
                    (*a, normalize_backward(a_hat, a_norms, &d_ahat)),
                    (*b, normalize_backward(b_hat, b_norms, &d_bhat)),
                ]
            }
            Op::Mask { x, keep } => {
                let mut g = dy.clone();
                for (v, &k) in g.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
                vec![(*x, g)]
            }
            Op::FillDiagonal(x) => {
                let mut g = dy.clone();
                for i in 0..g.rows() {
                    g.set(i, i, 0.0);
                }
                vec![(*x, g)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), dy.data()[0]))],
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (m, k) = (probs.rows(), probs.cols());
                let scale = dy.data()[0] / m as f64;
                let mut g = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    g.data_mut()[i * k + label] -= 1.0;
                }
                vec![(*logits, g.scale(scale))]
            }
        };
        Ok(out)
    }
}

/// Backward of `x ↦ x / ‖x‖` applied column-wise.
fn normalize_backward(x_hat: &Tensor, norms: &[f64], d_hat: &Tensor) -> Tensor {
    let (r, c) = (x_hat.rows(), x_hat.cols());
    let mut dots = vec![0.0; c];
    for i in 0..r {
        for (j, d) in dots.iter_mut().enumerate() {
            *d += x_hat.get(i, j) * d_hat.get(i, j);
        }
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            if norms[j] > ZERO_NORM {
                out.set(i, j, (d_hat.get(i, j) - x_hat.get(i, j) * dots[j]) / norms[j]);
            }
        }
    }
    out
}
