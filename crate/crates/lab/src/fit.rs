//! Plain supervised training of one network: teachers (labels) and KD
//! students (mean teacher soft labels).

use std::collections::BTreeMap;

use metaens_core::arch::{forward_graph, functional_forward};
use metaens_core::losses::{kd_loss, KdDirection};
use metaens_core::metrics::acc_topn;
use metaens_core::optim::{Optimizer, OptimizerKind};
use metaens_core::weights::{Batch, ParamKey, WeightSet};
use metaens_core::{rng, Error, Graph, Result, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augment: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 30,
            batch_size: 50,
            weight_decay: 0.0,
            augment: false,
        }
    }
}

pub enum Objective<'a, T> {
    Labels,
    Distill {
        teachers: &'a [WeightSet<T>],
        temperature: f64,
        direction: KdDirection,
    },
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Weights at the best validation accuracy.
    pub weights: WeightSet<T>,
    pub val_acc: f64,
    pub val_curve: Vec<f64>,
}

/// Logits of a whole split, computed in chunks.
pub fn split_logits<T: Scalar>(ws: &WeightSet<T>, split: &Split<T>) -> Result<Tensor<T>> {
    let n = split.len();
    let mut out = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(500) {
        let idx: Vec<usize> = (start..(start + 500).min(n)).collect();
        let l = functional_forward(ws.arch(), ws, &split.gather(&idx))?;
        classes = l.cols();
        out.extend_from_slice(l.data());
    }
    Tensor::new(vec![n, classes], out)
}

/// Top-1 accuracy (%) of a network on a split.
pub fn accuracy<T: Scalar>(ws: &WeightSet<T>, split: &Split<T>) -> Result<f64> {
    acc_topn(&split_logits(ws, split)?, &split.labels, 1)
}

/// Minibatch Adam on cross-entropy or on the KD objective; keeps the
/// best-validation weights.
pub fn fit<T: Scalar>(
    init: WeightSet<T>,
    data: &Dataset<T>,
    cfg: &FitConfig,
    objective: Objective<'_, T>,
    r: &mut rng::Rng,
) -> Result<FitResult<T>> {
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::config(
            "fit needs a positive batch size and learning rate",
        ));
    }
    let arch = init.arch().clone();
    let mut params: BTreeMap<String, Tensor<T>> = init
        .iter()
        .map(|(k, t)| (k.to_string(), t.clone()))
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut best = (accuracy(&init, &data.val)?, init.clone());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(r);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = data.train.gather(chunk);
            if cfg.augment {
                batch = augment(&batch, r);
            }
            let g = Graph::new();
            let vars = current(&arch, &params)?.to_params(&g);
            let x = g.constant(batch.inputs.clone());
            let logits = forward_graph(&g, &arch, &vars, x)?;
            let loss = match &objective {
                Objective::Labels => g.cross_entropy(logits, &batch.labels),
                Objective::Distill {
                    teachers,
                    temperature,
                    direction,
                } => {
                    let tl = teacher_logits(teachers, &batch)?;
                    kd_loss(&g, logits, &tl, *temperature, *direction)?
                }
            };
            if !g.scalar_value(loss).is_finite() {
                return Err(Error::NonFinite("training loss diverged".into()));
            }
            let grads = g.backward(loss);
            let mut gm = BTreeMap::new();
            for (k, v) in vars.iter() {
                let name = k.to_string();
                let mut gr = grads.get_or_zeros(*v, params[&name].shape());
                if cfg.weight_decay > 0.0 {
                    let wd = T::from_f64_lossy(cfg.weight_decay);
                    for (gv, &w) in gr.data_mut().iter_mut().zip(params[&name].data()) {
                        *gv += wd * w;
                    }
                }
                gm.insert(name, gr);
            }
            opt.step(&mut params, &gm, cfg.lr)?;
        }
        let ws = current(&arch, &params)?;
        let acc = accuracy(&ws, &data.val)?;
        curve.push(acc);
        if acc > best.0 {
            best = (acc, ws);
        }
    }
    Ok(FitResult {
        weights: best.1,
        val_acc: best.0,
        val_curve: curve,
    })
}

fn current<T: Scalar>(
    arch: &std::sync::Arc<metaens_core::arch::ArchSpec>,
    params: &BTreeMap<String, Tensor<T>>,
) -> Result<WeightSet<T>> {
    let tensors = params
        .iter()
        .map(|(k, t)| Ok((k.parse::<ParamKey>()?, t.clone())))
        .collect::<Result<_>>()?;
    WeightSet::new(arch.clone(), tensors)
}

pub fn teacher_logits<T: Scalar>(
    teachers: &[WeightSet<T>],
    batch: &Batch<T>,
) -> Result<Vec<Tensor<T>>> {
    teachers
        .iter()
        .map(|t| functional_forward(t.arch(), t, batch))
        .collect()
}
