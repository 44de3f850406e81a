//! Training objectives, all built as graph nodes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::{GenVars, Mode, WeightGenerator};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::weights::{Batch, WeightSet, WeightVars};

/// Which distribution sits in the first slot of the KD divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(student ‖ mean teacher)`
    #[default]
    StudentFirst,
    /// `KL(mean teacher ‖ student)`
    TeacherFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Averaged over generated scalars.
    #[default]
    Mean,
    /// Plain squared norm.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub kd_temperature: f64,
    pub kd_direction: KdDirection,
    pub consistency_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            kd_temperature: 2.0,
            kd_direction: KdDirection::StudentFirst,
            consistency_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.kd_temperature.is_finite() && self.kd_temperature > 0.0) {
            return Err(Error::config(format!(
                "kd_temperature must be > 0, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>, temp: f64) -> Tensor<T> {
    let g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.softmax(g.scale(v, c(1.0 / temp)));
    let out = g.value(s).clone();
    out
}

/// Mean teacher distribution at temperature `temp`.
pub fn mean_teacher_probs<T: Scalar>(teacher_logits: &[Tensor<T>], temp: f64) -> Result<Tensor<T>> {
    let first = teacher_logits
        .first()
        .ok_or_else(|| Error::config("KD needs at least one teacher"))?;
    let mut acc = Tensor::zeros(first.shape());
    for t in teacher_logits {
        if t.shape() != first.shape() {
            return Err(Error::structural(format!(
                "teacher logits {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        acc.add_assign(&softmax_rows(t, temp));
    }
    Ok(acc.scale(c(1.0 / teacher_logits.len() as f64)))
}

/// Batch-mean KL divergence between the student and the mean teacher soft
/// label at temperature `temp`, scaled by `temp²`.
pub fn kd_loss<T: Scalar>(
    g: &Graph<T>,
    student_logits: Var,
    teacher_logits: &[Tensor<T>],
    temp: f64,
    direction: KdDirection,
) -> Result<Var> {
    let shape = g.shape(student_logits);
    if shape.len() != 2 {
        return Err(Error::structural(format!(
            "student logits {shape:?} are not [B, C]"
        )));
    }
    let target = mean_teacher_probs(teacher_logits, temp)?;
    if target.shape() != shape.as_slice() {
        return Err(Error::structural(format!(
            "teacher logits {:?} vs student {shape:?}",
            target.shape()
        )));
    }
    let log_target = g.constant(target.map(|p| p.max(T::min_positive_value()).ln()));
    let target = g.constant(target);
    let log_s = g.log_softmax(g.scale(student_logits, c(1.0 / temp)));
    let per = match direction {
        KdDirection::StudentFirst => {
            let p = g.exp(log_s);
            g.mul(p, g.sub(log_s, log_target))
        }
        KdDirection::TeacherFirst => g.mul(target, g.sub(log_target, log_s)),
    };
    Ok(g.scale(g.sum(per), c(temp * temp / shape[0] as f64)))
}

/// Mean cross-entropy; labels are range-checked.
pub fn ce_loss<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::structural(format!(
            "logits {shape:?} with {} labels",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::structural(format!(
            "label {y} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(g.cross_entropy(logits, labels))
}

/// Squared difference between two generated networks, summed or averaged
/// over all scalars.
pub fn weight_distance<T: Scalar>(
    g: &Graph<T>,
    a: &WeightVars,
    b: &WeightVars,
    reduction: Reduction,
) -> Result<Var> {
    if a.len() != b.len() {
        return Err(Error::structural(
            "generated networks differ in tensor count",
        ));
    }
    let mut total = None;
    let mut count = 0usize;
    for ((ka, &va), (kb, &vb)) in a.iter().zip(b.iter()) {
        if ka != kb || g.shape(va) != g.shape(vb) {
            return Err(Error::structural(format!(
                "generated tensors {ka} and {kb} do not align"
            )));
        }
        let d = g.sub(va, vb);
        let s = g.sum(g.mul(d, d));
        count += g.value(va).numel();
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    let total = total.ok_or_else(|| Error::structural("empty weight set"))?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, c(1.0 / count as f64)),
    })
}

/// Teachers in shifted order `[w2, .., wN, w1]`.
pub fn shifted<T: Clone>(teachers: &[T]) -> Vec<T> {
    let mut v = teachers.to_vec();
    v.rotate_left(1);
    v
}

/// Cutoff streams for the two passes; `None` runs both in eval mode.
pub struct PassRngs<'a> {
    pub primary: &'a mut Rng,
    pub shifted: &'a mut Rng,
}

/// Distance between the students generated from the original and the
/// shifted teacher order.
pub fn shift_consistency<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    g: &Graph<T>,
    gen: &G,
    vars: &GenVars,
    teachers: &[WeightSet<T>],
    rngs: Option<PassRngs<'_>>,
    reduction: Reduction,
) -> Result<Var> {
    if teachers.len() < 2 {
        return Err(Error::config(
            "shift consistency needs at least two teachers",
        ));
    }
    let (m1, m2) = match rngs {
        Some(r) => (Mode::Train(r.primary), Mode::Train(r.shifted)),
        None => (Mode::Eval, Mode::Eval),
    };
    let a = gen.generate_graph(g, vars, teachers, m1, None)?;
    let b = gen.generate_graph(g, vars, &shifted(teachers), m2, None)?;
    weight_distance(g, &a, &b, reduction)
}

/// Loss nodes of one training step.
pub struct Combined {
    pub total: Var,
    pub ce: Var,
    /// Absent when `alpha == 0`; the shifted pass is then skipped.
    pub consist: Option<Var>,
    pub student: WeightVars,
}

/// Components as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub consist: f64,
    pub total: f64,
}

impl Combined {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> LossComponents {
        LossComponents {
            ce: g.scalar_value(self.ce).to_f64_lossy(),
            consist: self
                .consist
                .map_or(0.0, |v| g.scalar_value(v).to_f64_lossy()),
            total: g.scalar_value(self.total).to_f64_lossy(),
        }
    }
}

/// `CE(primary student) + alpha · consistency`.
pub fn combined_loss<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    g: &Graph<T>,
    gen: &G,
    vars: &GenVars,
    teachers: &[WeightSet<T>],
    batch: &Batch<T>,
    cfg: &LossConfig,
    rngs: Option<PassRngs<'_>>,
) -> Result<Combined> {
    cfg.validate()?;
    if cfg.alpha > 0.0 && teachers.len() < 2 {
        return Err(Error::config(
            "shift consistency needs at least two teachers",
        ));
    }
    let (m1, m2) = match rngs {
        Some(r) => (Mode::Train(r.primary), Some(Mode::Train(r.shifted))),
        None => (Mode::Eval, Some(Mode::Eval)),
    };
    let student = gen.generate_graph(g, vars, teachers, m1, None)?;
    let x = g.constant(batch.inputs.clone());
    let logits = crate::arch::forward_graph(g, gen.arch(), &student, x)?;
    let ce = ce_loss(g, logits, &batch.labels)?;
    if cfg.alpha == 0.0 {
        return Ok(Combined {
            total: ce,
            ce,
            consist: None,
            student,
        });
    }
    let other = gen.generate_graph(g, vars, &shifted(teachers), m2.unwrap(), None)?;
    let consist = weight_distance(g, &student, &other, cfg.consistency_reduction)?;
    let total = g.add(ce, g.scale(consist, c(cfg.alpha)));
    Ok(Combined {
        total,
        ce,
        consist: Some(consist),
        student,
    })
}

/// Mean squared error between generated and target weights.
pub fn l2_match_loss<T: Scalar>(
    g: &Graph<T>,
    generated: &WeightVars,
    target: &WeightSet<T>,
) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    if generated.len() != target.iter().count() {
        return Err(Error::structural(
            "generated and target networks differ in tensor count",
        ));
    }
    for (k, t) in target.iter() {
        let v = generated.get(&k.layer, k.role)?;
        if g.shape(v) != t.shape() {
            return Err(Error::structural(format!(
                "{k}: generated {:?} vs target {:?}",
                g.shape(v),
                t.shape()
            )));
        }
        let d = g.sub(v, g.constant(t.clone()));
        let s = g.sum(g.mul(d, d));
        count += t.numel();
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    let total = total.ok_or_else(|| Error::structural("empty weight set"))?;
    Ok(g.scale(total, c(1.0 / count as f64)))
}
