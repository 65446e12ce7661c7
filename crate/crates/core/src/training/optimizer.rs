use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Gradients, ParamId, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with decoupled weight decay.
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("training.optimizer.{name}");
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(field("lr"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field(name), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(field("eps"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(field("weight_decay"), "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Optimizer state. Moments and step counts are kept per parameter, since
/// alternating sub-steps update different subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    moments: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Update exactly the parameters in `ids`; a live parameter without a
    /// gradient entry is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &BTreeSet<ParamId>) -> Result<()> {
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            let g = grads.get_or_zeros(id, &shape);
            let moments = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                t: 0,
            });
            optimizer_step(store.get_mut(id), &g, &self.config, moments_parts(moments))?;
            if !store.get(id).is_finite() {
                return Err(Error::Numeric(format!("parameter {} became non-finite", store.name(id))));
            }
        }
        Ok(())
    }
}

fn moments_parts(m: &mut Moments) -> (&mut Tensor, &mut Tensor, &mut u64) {
    (&mut m.m, &mut m.v, &mut m.t)
}

/// One update of `param` in place.
pub fn optimizer_step(
    param: &mut Tensor,
    grad: &Tensor,
    config: &OptimizerConfig,
    (m, v, t): (&mut Tensor, &mut Tensor, &mut u64),
) -> Result<()> {
    param.expect_same_shape(grad, "optimizer_step")?;
    let lr = config.lr;
    match config.kind {
        OptimizerKind::Sgd => {
            let wd = config.weight_decay;
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * (g + wd * *p);
            }
        }
        OptimizerKind::Adam => {
            param.expect_same_shape(m, "optimizer_step")?;
            *t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let decay = 1.0 - lr * config.weight_decay;
            let it = param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (mi, vi)) in it {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: &OptimizerConfig, p: f64, g: f64) -> f64 {
        let mut param = Tensor::scalar(p);
        let (mut m, mut v, mut t) = (Tensor::scalar(0.0), Tensor::scalar(0.0), 0);
        optimizer_step(&mut param, &Tensor::scalar(g), config, (&mut m, &mut v, &mut t)).unwrap();
        param.data()[0]
    }

    #[test]
    fn sgd_arithmetic() {
        assert_eq!(run(&OptimizerConfig::sgd(0.1), 1.0, 2.0), 0.8);
        assert_eq!(run(&OptimizerConfig::sgd(0.1), 1.5, 0.0), 1.5);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let config = OptimizerConfig {
            weight_decay: 0.0,
            lr: 1e-3,
            ..OptimizerConfig::default()
        };
        let p = run(&config, 0.5, 1.0);
        assert!((p - (0.5 - 1e-3)).abs() < 1e-10, "{p}");
        assert_eq!(run(&config, 0.5, 0.0), 0.5);
    }

    #[test]
    fn decoupled_weight_decay() {
        let config = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        assert!((run(&config, 2.0, 0.0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2, 1]);
        let (mut m, mut v, mut t) = (Tensor::zeros(&[2, 1]), Tensor::zeros(&[2, 1]), 0);
        let err = optimizer_step(&mut p, &Tensor::zeros(&[1, 2]), &OptimizerConfig::default(), (&mut m, &mut v, &mut t));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn only_declared_ids_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(1.0));
        let before = store.clone();
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.step(&mut store, &Gradients::default(), &BTreeSet::from([a])).unwrap();
        assert_eq!(store.changed_ids(&before), BTreeSet::from([a]));
        assert_eq!(store.get(b), before.get(b));
    }
}
