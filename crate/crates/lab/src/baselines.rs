//! Reference methods: single teachers, logit averaging, a KD student, a
//! per-layer MLP weight predictor, and two ways of feeding a generator more
//! teachers than it was trained with.

use std::collections::BTreeMap;
use std::sync::Arc;

use metaens_core::arch::{functional_forward, ArchSpec};
use metaens_core::codec::{apply_norm, detokenize_graph, tokenize_layer, NormStats, TokenLayout};
use metaens_core::generator::{GenVars, Generator, Mode, WeightGenerator};
use metaens_core::losses::KdDirection;
use metaens_core::weights::{Batch, WeightSet, WeightVars};
use metaens_core::{rng, Error, Graph, Result, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::fit::{fit, FitConfig, FitResult, Objective};
use crate::zoo::Teacher;

/// Mean of the teachers' logits.
///
/// Each output element is summed over teachers in ascending value order, so
/// the result does not depend on the order of `teachers`, bit for bit.
pub fn ensemble_predict<T: Scalar>(
    teachers: &[WeightSet<T>],
    batch: &Batch<T>,
) -> Result<Tensor<T>> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::config("ensemble needs at least one teacher"))?;
    let logits = teachers
        .iter()
        .map(|t| {
            if t.arch() != first.arch() {
                return Err(Error::structural(
                    "ensemble members have different architectures",
                ));
            }
            functional_forward(t.arch(), t, batch)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = T::from_usize(teachers.len()).expect("teacher count");
    let mut out = Tensor::zeros(logits[0].shape());
    let mut column = Vec::with_capacity(logits.len());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        column.clear();
        column.extend(logits.iter().map(|l| l.data()[i]));
        column.sort_by(|a, b| a.to_f64_lossy().total_cmp(&b.to_f64_lossy()));
        *o = column.iter().fold(T::zero(), |acc, &v| acc + v) / n;
    }
    Ok(out)
}

/// How a KD student's weights start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdInit {
    /// Fresh random initialization.
    #[default]
    Random,
    /// A copy of the first teacher in the list.
    FirstTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub fit: FitConfig,
    pub temperature: f64,
    pub direction: KdDirection,
    pub init: KdInit,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            temperature: 2.0,
            direction: KdDirection::StudentFirst,
            init: KdInit::Random,
        }
    }
}

/// Trains a student of the teachers' architecture on the mean teacher soft
/// labels and returns its best-validation weights. A diverged run is
/// retried once at a tenth of the learning rate.
pub fn train_kd_student<T: Scalar>(
    teachers: &[WeightSet<T>],
    data: &Dataset<T>,
    cfg: &KdConfig,
    seed: u64,
) -> Result<FitResult<T>> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::config("KD needs at least one teacher"))?;
    let mut fit_cfg = cfg.fit.clone();
    for attempt in 0..2u64 {
        let init = match cfg.init {
            KdInit::Random => WeightSet::init(
                first.arch().clone(),
                &mut rng::substream(seed, "kd-init", attempt),
            ),
            KdInit::FirstTeacher => first.clone(),
        };
        let objective = Objective::Distill {
            teachers,
            temperature: cfg.temperature,
            direction: cfg.direction,
        };
        match fit(
            init,
            data,
            &fit_cfg,
            objective,
            &mut rng::substream(seed, "kd-fit", attempt),
        ) {
            Err(Error::NonFinite(_)) if attempt == 0 => fit_cfg.lr /= 10.0,
            other => return other,
        }
    }
    unreachable!("second attempt always returns")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub n_teachers: usize,
    /// Hidden width is `min(hidden_mult * d_layer, hidden_cap)`.
    pub hidden_mult: usize,
    pub hidden_cap: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            n_teachers: 3,
            hidden_mult: 4,
            hidden_cap: 1024,
        }
    }
}

impl MlpConfig {
    pub fn hidden(&self, d_layer: usize) -> usize {
        (self.hidden_mult * d_layer).min(self.hidden_cap).max(1)
    }
}

/// Names and shapes of the per-layer MLPs: `w1 [N·P, H]`, `b1 [H]`,
/// `w2 [H, P]`, `b2 [P]` with `P` the flattened layer size.
pub fn mlp_param_shapes(cfg: &MlpConfig, arch: &ArchSpec) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    for spec in &arch.layers {
        let lay = TokenLayout::for_layer(spec);
        let p = lay.seq_len * lay.d_layer;
        let h = cfg.hidden(lay.d_layer);
        let pre = format!("mlp.{}", spec.name);
        m.insert(format!("{pre}.w1"), vec![cfg.n_teachers * p, h]);
        m.insert(format!("{pre}.b1"), vec![h]);
        m.insert(format!("{pre}.w2"), vec![h, p]);
        m.insert(format!("{pre}.b2"), vec![p]);
    }
    m
}

/// One independent two-layer MLP per student layer, reading only the
/// concatenated (normalized) teacher weights of that layer.
#[derive(Clone, Debug)]
pub struct MlpPredictor<T> {
    config: MlpConfig,
    arch: Arc<ArchSpec>,
    params: BTreeMap<String, Tensor<T>>,
    norm: NormStats<T>,
}

impl<T: Scalar> MlpPredictor<T> {
    pub fn new(
        config: MlpConfig,
        arch: Arc<ArchSpec>,
        norm: NormStats<T>,
        r: &mut rng::Rng,
    ) -> Result<Self> {
        if config.n_teachers == 0 || config.hidden_mult == 0 || config.hidden_cap == 0 {
            return Err(Error::config(
                "MLP predictor needs positive teacher count and widths",
            ));
        }
        let params = mlp_param_shapes(&config, &arch)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".w1") || name.ends_with(".w2") {
                    Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), r)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            arch,
            params,
            norm,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }
}

impl<T: Scalar> WeightGenerator<T> for MlpPredictor<T> {
    fn arch(&self) -> &Arc<ArchSpec> {
        &self.arch
    }

    fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    fn generate_graph(
        &self,
        g: &Graph<T>,
        vars: &GenVars,
        teachers: &[WeightSet<T>],
        _mode: Mode<'_>,
        _trace: Option<&mut metaens_core::generator::GenerationTrace>,
    ) -> Result<WeightVars> {
        if teachers.len() != self.config.n_teachers {
            return Err(Error::config(format!(
                "MLP predictor reads exactly {} teachers, got {}",
                self.config.n_teachers,
                teachers.len()
            )));
        }
        if let Some(t) = teachers.iter().find(|t| **t.arch() != *self.arch) {
            return Err(Error::structural(format!(
                "teacher architecture `{}` does not match `{}`",
                t.arch().name,
                self.arch.name
            )));
        }
        let mut out = WeightVars::new();
        for spec in &self.arch.layers {
            let lay = TokenLayout::for_layer(spec);
            let p = lay.seq_len * lay.d_layer;
            let parts = teachers
                .iter()
                .map(|t| {
                    let tm = apply_norm(&tokenize_layer(t, spec)?, &self.norm)?;
                    Ok(g.constant(tm.tokens.reshape(&[1, p])?))
                })
                .collect::<Result<Vec<_>>>()?;
            let x = g.concat_cols(&parts);
            let pre = format!("mlp.{}", spec.name);
            let h = g.relu(g.add_row(
                g.matmul(x, vars.get(&format!("{pre}.w1"))?),
                vars.get(&format!("{pre}.b1"))?,
            ));
            let y = g.add_row(
                g.matmul(h, vars.get(&format!("{pre}.w2"))?),
                vars.get(&format!("{pre}.b2"))?,
            );
            let y = g.reshape(y, &[lay.seq_len, lay.d_layer]);
            let cs = self.norm.get(&lay.key)?;
            let sd = g.constant(Tensor::new(vec![lay.d_layer], cs.std.clone())?);
            let mu = g.constant(Tensor::new(vec![lay.d_layer], cs.mean.clone())?);
            detokenize_graph(g, g.add_row(g.mul_row(y, sd), mu), spec, &mut out)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Pairwise left fold with a two-teacher generator.
    Heuristic,
    /// All teachers in one generator pass.
    Concatenate,
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScaleMode::Heuristic => "heuristic",
            ScaleMode::Concatenate => "concatenate",
        })
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(ScaleMode::Heuristic),
            "concatenate" => Ok(ScaleMode::Concatenate),
            _ => Err(Error::config(format!(
                "unknown scaling mode `{s}` (heuristic, concatenate)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scaled<T> {
    pub student: WeightSet<T>,
    pub generator_calls: usize,
    /// One line per generator call, e.g. `t001+t004 -> s1`.
    pub reductions: Vec<String>,
}

/// Generates one student from `m = teachers.len()` teachers.
pub fn scale_teachers<T: Scalar>(
    gen: &Generator<T>,
    teachers: &[Teacher<T>],
    mode: ScaleMode,
) -> Result<Scaled<T>> {
    if teachers.len() < 2 {
        return Err(Error::config("teacher scaling needs m >= 2"));
    }
    match mode {
        ScaleMode::Concatenate => {
            let ws: Vec<WeightSet<T>> = teachers.iter().map(|t| t.weights.clone()).collect();
            let (student, _) = gen.generate_student(&ws, Mode::Eval)?;
            let ids: Vec<&str> = teachers.iter().map(|t| t.id.as_str()).collect();
            Ok(Scaled {
                student,
                generator_calls: 1,
                reductions: vec![format!("{} -> s1", ids.join("+"))],
            })
        }
        ScaleMode::Heuristic => {
            if gen.config().n_teachers != 2 {
                return Err(Error::config(format!(
                    "heuristic scaling needs a generator trained with 2 teachers, this one used {}",
                    gen.config().n_teachers
                )));
            }
            let mut acc = teachers[0].weights.clone();
            let mut acc_id = teachers[0].id.clone();
            let mut reductions = Vec::with_capacity(teachers.len() - 1);
            for (k, t) in teachers[1..].iter().enumerate() {
                let (next, _) = gen.generate_student(&[acc, t.weights.clone()], Mode::Eval)?;
                let id = format!("s{}", k + 1);
                reductions.push(format!("{acc_id}+{} -> {id}", t.id));
                acc = next;
                acc_id = id;
            }
            Ok(Scaled {
                student: acc,
                generator_calls: reductions.len(),
                reductions,
            })
        }
    }
}
