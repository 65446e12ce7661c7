//! Central finite-difference oracle for the tape.

use super::tape::{ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates with vanishing
/// gradients are compared at an absolute scale instead of amplifying
/// rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over coordinates of [`relative_error`].
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(k, p)| tape.param(ParamId(k), p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.try_value(out)?;
    if value.len() != 1 || !value.data()[0].is_finite() {
        return Err(Error::Numeric(format!(
            "finite-difference objective must be a finite scalar, got shape {:?}",
            value.shape()
        )));
    }
    Ok((tape, out))
}

fn scalar_value<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, out) = evaluate(params, f)?;
    Ok(tape.value(out).data()[0])
}

/// Compare the tape's gradients of `f` at `params` with central differences
/// using the default step `h = 1e-5`.
///
/// `f` receives one variable per entry of `params` (registered as
/// `ParamId(0)`, `ParamId(1)`, ...) and must return a scalar.
pub fn finite_difference_check<F>(params: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_with_step(params, f, DEFAULT_STEP)
}

pub fn finite_difference_check_with_step<F>(params: &[Tensor], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, out) = evaluate(params, &f)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(k, p)| grads.get_or_zeros(ParamId(k), p.shape()))
        .collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut probe = params.to_vec();
    for k in 0..params.len() {
        let mut num = Tensor::zeros(params[k].shape());
        for c in 0..params[k].len() {
            let orig = params[k].data()[c];
            probe[k].data_mut()[c] = orig + h;
            let plus = scalar_value(&probe, &f)?;
            probe[k].data_mut()[c] = orig - h;
            let minus = scalar_value(&probe, &f)?;
            probe[k].data_mut()[c] = orig;

            let n = (plus - minus) / (2.0 * h);
            if !n.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at param {k}, coord {c}")));
            }
            num.data_mut()[c] = n;
            let a = analytic[k].data()[c];
            let rel = relative_error(a, n);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((k, c));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_relative_error: max_rel,
        worst,
        analytic,
        numeric,
    })
}
