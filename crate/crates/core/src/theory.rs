//! Closed-form two-modality ordering model.
//!
//! Weak-first training leaves the weak memory error `δ₁` on the small weight
//! `α₁` and lets the strong modality contribute its residual `ε`; strong-first
//! ends on the weak modality, whose inherited error is `δ₂`:
//!
//! ```text
//! L(w→s) = α₁·δ₁ + α₂·ε
//! L(s→w) = α₂·ε + α₁·δ₂
//! ΔL     = α₁·(δ₂ − δ₁) = L(s→w) − L(w→s)
//! ```
//!
//! Everything is generic over the number type so the identity can be checked
//! exactly with rationals as well as evaluated in `f64`.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingInstance<T> {
    pub alpha1: T,
    pub alpha2: T,
    pub delta1: T,
    pub delta2: T,
    pub epsilon: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    W2s,
    S2w,
}

impl<T: Num + PartialOrd + Clone + Debug> OrderingInstance<T> {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha1", &self.alpha1),
            ("alpha2", &self.alpha2),
            ("delta1", &self.delta1),
            ("delta2", &self.delta2),
            ("epsilon", &self.epsilon),
        ];
        for (name, v) in fields {
            // NaN fails both comparisons and is rejected too.
            if !(*v >= T::zero()) {
                return Err(Error::Domain(format!("{name} = {v:?} must be non-negative")));
            }
        }
        Ok(())
    }
}

pub fn fusion_loss<T: Num + PartialOrd + Clone + Debug>(instance: &OrderingInstance<T>, order: Order) -> Result<T> {
    instance.validate()?;
    let i = instance.clone();
    Ok(match order {
        Order::W2s => i.alpha1 * i.delta1 + i.alpha2 * i.epsilon,
        Order::S2w => i.alpha2 * i.epsilon + i.alpha1 * i.delta2,
    })
}

pub fn gap<T: Num + PartialOrd + Clone + Debug>(instance: &OrderingInstance<T>) -> Result<T> {
    instance.validate()?;
    let i = instance.clone();
    Ok(i.alpha1 * (i.delta2 - i.delta1))
}

/// Exact rational copy of an `f64` instance.
pub fn to_rational(instance: &OrderingInstance<f64>) -> Result<OrderingInstance<BigRational>> {
    let conv = |v: f64| BigRational::from_float(v).ok_or_else(|| Error::Domain(format!("{v} is not finite")));
    Ok(OrderingInstance {
        alpha1: conv(instance.alpha1)?,
        alpha2: conv(instance.alpha2)?,
        delta1: conv(instance.delta1)?,
        delta2: conv(instance.delta2)?,
        epsilon: conv(instance.epsilon)?,
    })
}

/// `ΔL == L(s→w) − L(w→s)`, evaluated exactly.
pub fn identity_holds_exactly(instance: &OrderingInstance<f64>) -> Result<bool> {
    let r = to_rational(instance)?;
    let lhs = gap(&r)?;
    let rhs = fusion_loss(&r, Order::S2w)? - fusion_loss(&r, Order::W2s)?;
    Ok(lhs == rhs)
}

pub fn rational_to_f64(v: &BigRational) -> f64 {
    let (n, d): (&BigInt, &BigInt) = (v.numer(), v.denom());
    match (n.to_f64(), d.to_f64()) {
        (Some(n), Some(d)) if d.is_finite() && n.is_finite() => n / d,
        _ => v.to_f64().unwrap_or(f64::NAN),
    }
}

/// One draw of the Monte-Carlo construction with capacity gap `kappa`.
pub fn sample_instance<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> OrderingInstance<f64> {
    let delta1: f64 = rng.random();
    let delta2 = delta1 + kappa * rng.random::<f64>();
    let epsilon = 0.1 * delta1 * rng.random::<f64>();
    let alpha1 = 0.3 * rng.random::<f64>();
    OrderingInstance {
        alpha1,
        alpha2: 1.0 - alpha1,
        delta1,
        delta2,
        epsilon,
    }
}

/// Fraction of sampled instances with a strictly positive gap.
pub fn monte_carlo_ordering(kappa: f64, trials: usize, seed: u64) -> Result<f64> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Domain(format!("kappa = {kappa} must be finite and non-negative")));
    }
    if trials == 0 {
        return Err(Error::Domain("trials must be at least 1".into()));
    }
    let mut rng = rng_for(seed, Stream::Theory);
    let mut positive = 0usize;
    for _ in 0..trials {
        if gap(&sample_instance(kappa, &mut rng))? > 0.0 {
            positive += 1;
        }
    }
    Ok(positive as f64 / trials as f64)
}
