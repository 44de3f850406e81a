//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

/// Optimizer with its moment buffers; buffers are created lazily per name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub first: ParamMap<T>,
    pub second: ParamMap<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamMap<T>, grads: &ParamMap<T>, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.steps += 1;
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::structural(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::structural(format!(
                    "`{name}`: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= c::<T>(lr) * d;
                        }
                    } else {
                        let m = self
                            .first
                            .entry(name.clone())
                            .or_insert_with(|| Tensor::zeros(g.shape()));
                        let mu: T = c(momentum);
                        for ((w, mv), &d) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data())
                        {
                            *mv = mu * *mv + d;
                            *w -= c::<T>(lr) * *mv;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let t = self.steps as i32;
                    let step: T = c(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)));
                    let (b1, b2, e): (T, T, T) = (c(beta1), c(beta2), c(eps));
                    for (((w, mv), vv), &d) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * d;
                        *vv = b2 * *vv + (T::one() - b2) * d * d;
                        *w -= step * *mv / (vv.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `base · decay^⌊epoch / every⌋`
pub fn step_decay_lr(base: f64, decay: f64, every: u64, epoch: u64) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamMap<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s: T = c(max_norm / norm);
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
