//! Generator training in three stages: L2 pretraining on per-tuple KD
//! students, the main loop on the combined loss through the generated
//! student, and fine-tuning on a pinned set of unseen teachers.
//!
//! Every stage advances a [`RunState`] that owns all mutable training state
//! except the generator's parameters, so a run can be stopped at any step,
//! saved, and resumed bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use metaens_core::generator::{Mode, WeightGenerator};
use metaens_core::losses::{combined_loss, l2_match_loss, LossConfig, PassRngs};
use metaens_core::optim::{clip_global_norm, Optimizer, OptimizerKind, ParamMap};
use metaens_core::weights::WeightSet;
use metaens_core::{rng, Error, Graph, Result, Scalar, Tensor};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::baselines::{train_kd_student, KdConfig, KdInit};
use crate::data::{Dataset, Split};
use crate::fit::{accuracy, FitConfig};
use crate::io::{
    load_tensors, load_weights, read_toml, save_tensors, save_weights, write_atomic, write_toml,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_optimizer: OptimizerKind,
    pub pretrain_lr: f64,
    /// Pretraining lr decays geometrically to this fraction at the last step.
    pub pretrain_final_lr_ratio: f64,
    pub pretrain_max_steps: usize,
    /// Window length (steps) of the plateau check.
    pub pretrain_eval_every: usize,
    pub pretrain_tuples: usize,
    pub kd_target: KdConfig,
    pub main_lr: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    pub reload_interval: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub val_every: usize,
    pub patience: usize,
    /// Fixed train-split tuples whose mean val accuracy drives early stopping.
    pub probe_tuples: usize,
    pub clip_norm: f64,
    pub max_nan_restarts: usize,
    pub finetune_max_steps: usize,
    pub finetune_val_every: usize,
    pub finetune_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_optimizer: OptimizerKind::adam(),
            pretrain_lr: 1e-3,
            pretrain_final_lr_ratio: 0.1,
            pretrain_max_steps: 8000,
            pretrain_eval_every: 250,
            pretrain_tuples: 150,
            kd_target: KdConfig {
                fit: FitConfig {
                    lr: 3e-3,
                    epochs: 5,
                    ..FitConfig::default()
                },
                init: KdInit::FirstTeacher,
                ..KdConfig::default()
            },
            main_lr: 3e-5,
            lr_decay: 0.9,
            decay_every_epochs: 5,
            reload_interval: 5000,
            batch_size: 50,
            max_steps: 100_000,
            val_every: 500,
            patience: 10,
            probe_tuples: 4,
            clip_norm: 5.0,
            max_nan_restarts: 3,
            finetune_max_steps: 200,
            finetune_val_every: 20,
            finetune_patience: 5,
        }
    }
}

impl TrainConfig {
    /// Step counts sized for the digits desk pool.
    pub fn desk() -> Self {
        Self {
            reload_interval: 50,
            max_steps: 600,
            val_every: 50,
            patience: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("pretrain_lr", self.pretrain_lr),
            ("main_lr", self.main_lr),
            ("lr_decay", self.lr_decay),
            ("pretrain_final_lr_ratio", self.pretrain_final_lr_ratio),
            ("clip_norm", self.clip_norm),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(format!("{name} must be positive, got {v}")));
        }
        let counts = [
            ("reload_interval", self.reload_interval),
            ("batch_size", self.batch_size),
            ("val_every", self.val_every),
            ("decay_every_epochs", self.decay_every_epochs),
            ("pretrain_eval_every", self.pretrain_eval_every),
            ("finetune_val_every", self.finetune_val_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    /// Settings of the pinned fine-tuning stage.
    pub fn finetune_view(&self) -> Self {
        Self {
            max_steps: self.finetune_max_steps,
            val_every: self.finetune_val_every,
            patience: self.finetune_patience,
            ..self.clone()
        }
    }

    /// Main-stage learning rate at `epoch`.
    pub fn main_lr_at(&self, epoch: usize) -> f64 {
        self.main_lr * self.lr_decay.powi((epoch / self.decay_every_epochs) as i32)
    }

    pub fn pretrain_lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.pretrain_max_steps.max(1) as f64;
        self.pretrain_lr * self.pretrain_final_lr_ratio.powf(frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Train,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    /// Cross-entropy (train, finetune) or L2 matching loss (pretrain).
    pub loss: f64,
    pub consist: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub tuple: String,
    pub val_heldin: Option<f64>,
    pub val_probe: Option<f64>,
    pub event: String,
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(r: &rng::Rng) -> Self {
        Self {
            seed: hex::encode(r.get_seed()),
            stream: format!("{:x}", r.get_stream()),
            word_pos: format!("{:x}", r.get_word_pos()),
        }
    }

    pub fn restore(&self) -> Result<rng::Rng> {
        let bad = |what: &str| Error::config(format!("corrupt rng state ({what})"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut r = rng::Rng::from_seed(seed);
        r.set_stream(u64::from_str_radix(&self.stream, 16).map_err(|_| bad("stream"))?);
        r.set_word_pos(u128::from_str_radix(&self.word_pos, 16).map_err(|_| bad("word position"))?);
        Ok(r)
    }
}

const SAMPLER: &str = "sampler";
const BATCH: &str = "batch";
const CUTOFF_A: &str = "cutoff-a";
const CUTOFF_B: &str = "cutoff-b";

/// Everything a stage mutates besides the generator parameters.
#[derive(Clone, Debug)]
pub struct RunState<T> {
    pub stage: Stage,
    pub step: usize,
    pub tuple: Vec<String>,
    pub best_val: f64,
    pub best_step: usize,
    pub since_improvement: usize,
    pub lr_scale: f64,
    pub nan_restarts: usize,
    pub finished: bool,
    pub optimizer: Optimizer<T>,
    pub best_params: ParamMap<T>,
    /// Parameters and optimizer at the last validation, restored on NaN.
    pub good_params: ParamMap<T>,
    pub good_optimizer: Optimizer<T>,
    pub rngs: BTreeMap<String, rng::Rng>,
    pub order: Vec<usize>,
    pub cursor: usize,
    /// Reload and validation for the current step have run.
    pub prepared: bool,
    /// Pretraining: mean loss of each completed window.
    pub history: Vec<f64>,
    pub window_sum: f64,
    pub window_n: usize,
    pub log: Vec<LogRow>,
}

impl<T: Scalar> RunState<T> {
    pub fn new(stage: Stage, seed: u64, params: &ParamMap<T>, cfg: &TrainConfig) -> Self {
        let kind = match stage {
            Stage::Pretrain => cfg.pretrain_optimizer,
            Stage::Train | Stage::Finetune => OptimizerKind::adam(),
        };
        let tag = stage.to_string();
        let rngs = [SAMPLER, BATCH, CUTOFF_A, CUTOFF_B]
            .into_iter()
            .map(|n| (n.to_string(), rng::stream(seed, &format!("{tag}/{n}"))))
            .collect();
        Self {
            stage,
            step: 0,
            tuple: Vec::new(),
            best_val: f64::NEG_INFINITY,
            best_step: 0,
            since_improvement: 0,
            lr_scale: 1.0,
            nan_restarts: 0,
            finished: false,
            optimizer: Optimizer::new(kind),
            best_params: params.clone(),
            good_params: params.clone(),
            good_optimizer: Optimizer::new(kind),
            rngs,
            order: Vec::new(),
            cursor: 0,
            prepared: false,
            history: Vec::new(),
            window_sum: 0.0,
            window_n: 0,
            log: Vec::new(),
        }
    }

    fn rng(&mut self, name: &str) -> &mut rng::Rng {
        self.rngs
            .get_mut(name)
            .expect("stage rng streams are created up front")
    }

    fn take_rng(&mut self, name: &str) -> rng::Rng {
        self.rngs
            .remove(name)
            .expect("stage rng streams are created up front")
    }

    /// Validation rows only.
    pub fn val_curve(&self) -> Vec<(usize, f64)> {
        self.log
            .iter()
            .filter_map(|r| r.val_probe.or(r.val_heldin).map(|v| (r.step, v)))
            .collect()
    }
}

/// Writes the metrics log as CSV.
pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::config(format!("metrics log: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::config(format!("metrics log: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::config(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    stage: Stage,
    step: usize,
    tuple: Vec<String>,
    best_val: f64,
    best_step: usize,
    since_improvement: usize,
    lr_scale: f64,
    nan_restarts: usize,
    finished: bool,
    optimizer_kind: OptimizerKind,
    optimizer_steps: u64,
    good_optimizer_steps: u64,
    rngs: BTreeMap<String, RngState>,
    order: Vec<usize>,
    cursor: usize,
    prepared: bool,
    history: Vec<f64>,
    window_sum: f64,
    window_n: usize,
}

fn prefixed<T: Scalar>(out: &mut BTreeMap<String, Tensor<T>>, prefix: &str, map: &ParamMap<T>) {
    for (k, t) in map {
        out.insert(format!("{prefix}{k}"), t.clone());
    }
}

fn strip<T: Scalar>(all: &BTreeMap<String, Tensor<T>>, prefix: &str) -> ParamMap<T> {
    all.iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Saves the generator parameters and the run state under `dir`
/// (`state.toml`, `state.safetensors`, `metrics.csv`).
pub fn save_run<T: Scalar>(dir: &Path, params: &ParamMap<T>, st: &RunState<T>) -> Result<()> {
    let file = StateFile {
        stage: st.stage,
        step: st.step,
        tuple: st.tuple.clone(),
        best_val: st.best_val,
        best_step: st.best_step,
        since_improvement: st.since_improvement,
        lr_scale: st.lr_scale,
        nan_restarts: st.nan_restarts,
        finished: st.finished,
        optimizer_kind: st.optimizer.kind,
        optimizer_steps: st.optimizer.steps,
        good_optimizer_steps: st.good_optimizer.steps,
        rngs: st
            .rngs
            .iter()
            .map(|(k, r)| (k.clone(), RngState::capture(r)))
            .collect(),
        order: st.order.clone(),
        cursor: st.cursor,
        prepared: st.prepared,
        history: st.history.clone(),
        window_sum: st.window_sum,
        window_n: st.window_n,
    };
    let mut tensors = BTreeMap::new();
    prefixed(&mut tensors, "param.", params);
    prefixed(&mut tensors, "best.", &st.best_params);
    prefixed(&mut tensors, "good.", &st.good_params);
    prefixed(&mut tensors, "m1.", &st.optimizer.first);
    prefixed(&mut tensors, "m2.", &st.optimizer.second);
    prefixed(&mut tensors, "gm1.", &st.good_optimizer.first);
    prefixed(&mut tensors, "gm2.", &st.good_optimizer.second);
    save_tensors(&dir.join("state.safetensors"), &tensors)?;
    write_log(&dir.join("metrics.csv"), &st.log)?;
    write_toml(&dir.join("state.toml"), &file)
}

/// Inverse of [`save_run`]: the generator parameters and the run state.
pub fn load_run<T: Scalar>(dir: &Path) -> Result<(ParamMap<T>, RunState<T>)> {
    let file: StateFile = read_toml(&dir.join("state.toml"))?;
    let tensors = load_tensors::<T>(&dir.join("state.safetensors"))?;
    let rngs = file
        .rngs
        .iter()
        .map(|(k, s)| Ok((k.clone(), s.restore()?)))
        .collect::<Result<_>>()?;
    let st = RunState {
        stage: file.stage,
        step: file.step,
        tuple: file.tuple,
        best_val: file.best_val,
        best_step: file.best_step,
        since_improvement: file.since_improvement,
        lr_scale: file.lr_scale,
        nan_restarts: file.nan_restarts,
        finished: file.finished,
        optimizer: Optimizer {
            kind: file.optimizer_kind,
            steps: file.optimizer_steps,
            first: strip(&tensors, "m1."),
            second: strip(&tensors, "m2."),
        },
        best_params: strip(&tensors, "best."),
        good_params: strip(&tensors, "good."),
        good_optimizer: Optimizer {
            kind: file.optimizer_kind,
            steps: file.good_optimizer_steps,
            first: strip(&tensors, "gm1."),
            second: strip(&tensors, "gm2."),
        },
        rngs,
        order: file.order,
        cursor: file.cursor,
        prepared: file.prepared,
        history: file.history,
        window_sum: file.window_sum,
        window_n: file.window_n,
        log: read_log(&dir.join("metrics.csv"))?,
    };
    Ok((strip(&tensors, "param."), st))
}

/// Canonical cache key of a teacher tuple: sorted ids joined by `+`.
pub fn tuple_key(ids: &[String]) -> String {
    let mut s = ids.to_vec();
    s.sort();
    s.join("+")
}

/// `count` distinct tuples of `n` ids, each in sampled order.
pub fn sample_tuples(
    ids: &[String],
    n: usize,
    count: usize,
    r: &mut rng::Rng,
) -> Result<Vec<Vec<String>>> {
    if n == 0 || n > ids.len() {
        return Err(Error::config(format!(
            "cannot form tuples of {n} from {} teachers",
            ids.len()
        )));
    }
    let mut out: Vec<Vec<String>> = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::config(format!(
                "only {} distinct tuples of {n} found among {} teachers",
                out.len(),
                ids.len()
            )));
        }
        let t: Vec<String> = sample(r, ids.len(), n)
            .into_iter()
            .map(|i| ids[i].clone())
            .collect();
        if seen.insert(tuple_key(&t)) {
            out.push(t);
        }
    }
    Ok(out)
}

/// A KD student used as a pretraining target, keyed by sorted teacher ids.
#[derive(Clone, Debug)]
pub struct KdTarget<T> {
    pub ids: Vec<String>,
    pub weights: WeightSet<T>,
}

fn lookup<T>(teachers: &BTreeMap<String, WeightSet<T>>, ids: &[String]) -> Result<Vec<WeightSet<T>>>
where
    T: Clone,
{
    ids.iter()
        .map(|id| {
            teachers.get(id).cloned().ok_or_else(|| {
                Error::config(format!("teacher `{id}` is not available to this stage"))
            })
        })
        .collect()
}

/// KD students for `tuples`, trained on demand and cached on disk by
/// [`tuple_key`] when `cache` is given. Each target's training seed depends
/// only on `seed` and the key, so cached and fresh targets agree.
pub fn kd_targets<T: Scalar>(
    teachers: &BTreeMap<String, WeightSet<T>>,
    data: &Dataset<T>,
    tuples: &[Vec<String>],
    cfg: &KdConfig,
    cache: Option<&Path>,
    seed: u64,
) -> Result<Vec<KdTarget<T>>> {
    tuples
        .iter()
        .map(|t| {
            let mut ids = t.clone();
            ids.sort();
            let key = tuple_key(&ids);
            let members = lookup(teachers, &ids)?;
            let path = cache.map(|d| d.join(format!("{key}.safetensors")));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                let weights = load_weights(p, members[0].arch().clone())?;
                return Ok(KdTarget { ids, weights });
            }
            let kd_seed = rng::stream(seed, &key).random::<u64>();
            let weights = train_kd_student(&members, data, cfg, kd_seed)?.weights;
            if let Some(p) = path {
                save_weights(&p, &weights)?;
            }
            Ok(KdTarget { ids, weights })
        })
        .collect()
}

fn grads_of<T: Scalar>(
    g: &Graph<T>,
    vars: &metaens_core::generator::GenVars,
    params: &ParamMap<T>,
    loss: metaens_core::Var,
) -> ParamMap<T> {
    let grads = g.backward(loss);
    vars.iter()
        .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v, params[k].shape())))
        .collect()
}

fn all_finite<T: Scalar>(m: &ParamMap<T>) -> bool {
    m.values().all(Tensor::all_finite)
}

/// Val accuracy of the student generated (eval mode) from `teachers`.
pub fn student_accuracy<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    gen: &G,
    teachers: &[WeightSet<T>],
    split: &Split<T>,
) -> Result<f64> {
    let (ws, _) = gen.generate_student(teachers, Mode::Eval)?;
    accuracy(&ws, split)
}

/// L2 pretraining: matches generated students to KD targets (presented in
/// sorted-id order) until `pretrain_max_steps`, the loss plateaus, or the
/// state reaches step `until`.
pub fn pretrain<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    gen: &mut G,
    st: &mut RunState<T>,
    teachers: &BTreeMap<String, WeightSet<T>>,
    targets: &[KdTarget<T>],
    cfg: &TrainConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::config("pretraining needs at least one KD target"));
    }
    let inputs = targets
        .iter()
        .map(|t| lookup(teachers, &t.ids))
        .collect::<Result<Vec<_>>>()?;
    let stop = until.min(cfg.pretrain_max_steps);
    let mut cut = st.take_rng(CUTOFF_A);
    let result = (|| {
        while st.step < stop && !st.finished {
            let k = st.rng(SAMPLER).random_range(0..targets.len());
            let lr = cfg.pretrain_lr_at(st.step);
            let g = Graph::new();
            let vars = gen.register(&g, true);
            let wv = gen.generate_graph(&g, &vars, &inputs[k], Mode::Train(&mut cut), None)?;
            let loss = l2_match_loss(&g, &wv, &targets[k].weights)?;
            let lv = g.scalar_value(loss).to_f64_lossy();
            let mut grads = grads_of(&g, &vars, gen.params(), loss);
            if !lv.is_finite() || !all_finite(&grads) {
                return Err(Error::NonFinite(format!(
                    "pretraining loss {lv} at step {} on tuple {}",
                    st.step,
                    targets[k].ids.join("+")
                )));
            }
            let gn = clip_global_norm(&mut grads, cfg.clip_norm);
            st.optimizer.step(gen.params_mut(), &grads, lr)?;
            st.window_sum += lv;
            st.window_n += 1;
            let mut event = String::new();
            if st.window_n == cfg.pretrain_eval_every {
                st.history.push(st.window_sum / st.window_n as f64);
                st.window_sum = 0.0;
                st.window_n = 0;
                let h = &st.history;
                if h.len() > 5 {
                    let (old, new) = (h[h.len() - 6], h[h.len() - 1]);
                    if (old - new) / old < 1e-3 {
                        st.finished = true;
                        event = "plateau".into();
                    }
                }
            }
            st.log.push(LogRow {
                stage: Stage::Pretrain,
                step: st.step,
                lr,
                loss: lv,
                consist: 0.0,
                total: lv,
                grad_norm: gn,
                tuple: targets[k].ids.join("+"),
                val_heldin: None,
                val_probe: None,
                event,
            });
            st.step += 1;
        }
        if st.step >= cfg.pretrain_max_steps {
            st.finished = true;
        }
        Ok(())
    })();
    st.rngs.insert(CUTOFF_A.to_string(), cut);
    st.best_params = gen.params().clone();
    result
}

fn validate<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    gen: &G,
    st: &mut RunState<T>,
    current: &[WeightSet<T>],
    probes: &[Vec<WeightSet<T>>],
    pinned: bool,
    data: &Dataset<T>,
) -> Result<()> {
    let heldin = student_accuracy(gen, current, &data.val)?;
    let probe = if probes.is_empty() || pinned {
        None
    } else {
        let s = probes
            .iter()
            .map(|p| student_accuracy(gen, p, &data.val))
            .sum::<Result<f64>>()?;
        Some(s / probes.len() as f64)
    };
    let monitored = probe.unwrap_or(heldin);
    if monitored > st.best_val {
        st.best_val = monitored;
        st.best_step = st.step;
        st.best_params = gen.params().clone();
        st.since_improvement = 0;
    } else {
        st.since_improvement += 1;
    }
    st.good_params = gen.params().clone();
    st.good_optimizer = st.optimizer.clone();
    st.log.push(LogRow {
        stage: st.stage,
        step: st.step,
        lr: 0.0,
        loss: 0.0,
        consist: 0.0,
        total: 0.0,
        grad_norm: 0.0,
        tuple: st.tuple.join("+"),
        val_heldin: Some(heldin),
        val_probe: probe,
        event: "validate".into(),
    });
    Ok(())
}

/// Where the main loop draws its teachers from.
pub struct TeacherSource<'a, T> {
    /// Every checkpoint this stage may read.
    pub teachers: &'a BTreeMap<String, WeightSet<T>>,
    /// Fixed tuples whose mean val accuracy is monitored.
    pub probe: Vec<Vec<String>>,
    /// Fine-tuning: always use these ids, in this order.
    pub pinned: Option<Vec<String>>,
}

/// Main loop on the combined loss. Resamples `n_teachers` ids every
/// `reload_interval` steps (unless pinned), validates every `val_every`
/// steps, keeps the best parameters, and stops on patience or
/// `max_steps`; non-finite losses halve the learning rate and restore the
/// last validated parameters, up to `max_nan_restarts` times.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    gen: &mut G,
    st: &mut RunState<T>,
    source: &TeacherSource<'_, T>,
    n_teachers: usize,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let ids: Vec<String> = source.teachers.keys().cloned().collect();
    let probes = source
        .probe
        .iter()
        .map(|t| lookup(source.teachers, t))
        .collect::<Result<Vec<_>>>()?;
    let n_train = data.train.len();
    let stop = until.min(cfg.max_steps);
    let mut cut_a = st.take_rng(CUTOFF_A);
    let mut cut_b = st.take_rng(CUTOFF_B);
    let result = (|| loop {
        if st.finished {
            return Ok(());
        }
        if !st.prepared {
            if let Some(p) = &source.pinned {
                st.tuple = p.clone();
            } else if st.step.is_multiple_of(cfg.reload_interval) || st.tuple.is_empty() {
                st.tuple = sample_tuples(&ids, n_teachers, 1, st.rng(SAMPLER))?.remove(0);
            }
            st.prepared = true;
            if st.step.is_multiple_of(cfg.val_every) || st.step >= cfg.max_steps {
                let current = lookup(source.teachers, &st.tuple)?;
                validate(gen, st, &current, &probes, source.pinned.is_some(), data)?;
                if st.since_improvement >= cfg.patience.max(1) || st.step >= cfg.max_steps {
                    st.finished = true;
                    return Ok(());
                }
            }
        }
        if st.step >= stop {
            return Ok(());
        }
        if st.cursor + cfg.batch_size > st.order.len() {
            st.order = (0..n_train).collect();
            let mut r = st.take_rng(BATCH);
            st.order.shuffle(&mut r);
            st.rngs.insert(BATCH.to_string(), r);
            st.cursor = 0;
        }
        let current = lookup(source.teachers, &st.tuple)?;
        let batch = data
            .train
            .gather(&st.order[st.cursor..st.cursor + cfg.batch_size]);
        st.cursor += cfg.batch_size;
        let epoch = st.step * cfg.batch_size / n_train;
        let lr = cfg.main_lr_at(epoch) * st.lr_scale;
        let g = Graph::new();
        let vars = gen.register(&g, true);
        let out = combined_loss(
            &g,
            gen,
            &vars,
            &current,
            &batch,
            loss_cfg,
            Some(PassRngs {
                primary: &mut cut_a,
                shifted: &mut cut_b,
            }),
        )?;
        let c = out.components(&g);
        let mut grads = grads_of(&g, &vars, gen.params(), out.total);
        if !c.total.is_finite() || !all_finite(&grads) {
            st.nan_restarts += 1;
            if st.nan_restarts > cfg.max_nan_restarts {
                return Err(Error::NonFinite(format!(
                    "loss {} at step {} on tuple {} after {} restarts (lr {lr})",
                    c.total,
                    st.step,
                    st.tuple.join("+"),
                    cfg.max_nan_restarts
                )));
            }
            st.lr_scale *= 0.5;
            *gen.params_mut() = st.good_params.clone();
            st.optimizer = st.good_optimizer.clone();
            st.log.push(LogRow {
                stage: st.stage,
                step: st.step,
                lr,
                loss: c.ce,
                consist: c.consist,
                total: c.total,
                grad_norm: f64::NAN,
                tuple: st.tuple.join("+"),
                val_heldin: None,
                val_probe: None,
                event: "nan_restart".into(),
            });
            continue;
        }
        let gn = clip_global_norm(&mut grads, cfg.clip_norm);
        st.optimizer.step(gen.params_mut(), &grads, lr)?;
        st.log.push(LogRow {
            stage: st.stage,
            step: st.step,
            lr,
            loss: c.ce,
            consist: c.consist,
            total: c.total,
            grad_norm: gn,
            tuple: st.tuple.join("+"),
            val_heldin: None,
            val_probe: None,
            event: String::new(),
        });
        st.step += 1;
        st.prepared = false;
    })();
    st.rngs.insert(CUTOFF_A.to_string(), cut_a);
    st.rngs.insert(CUTOFF_B.to_string(), cut_b);
    result
}

/// WF*: continues [`train`] with the teacher tuple pinned to `unseen` (ids
/// into `teachers`) and early-stops on that tuple's val accuracy. Returns
/// the finished state; the generator holds the best parameters.
#[allow(clippy::too_many_arguments)]
pub fn finetune_unseen<T: Scalar, G: WeightGenerator<T> + ?Sized>(
    gen: &mut G,
    teachers: &BTreeMap<String, WeightSet<T>>,
    unseen: &[String],
    n_teachers: usize,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<RunState<T>> {
    let ft = cfg.finetune_view();
    let mut st = RunState::new(Stage::Finetune, seed, gen.params(), &ft);
    let source = TeacherSource {
        teachers,
        probe: Vec::new(),
        pinned: Some(unseen.to_vec()),
    };
    train(
        gen,
        &mut st,
        &source,
        n_teachers,
        data,
        &ft,
        loss_cfg,
        usize::MAX,
    )?;
    *gen.params_mut() = st.best_params.clone();
    Ok(st)
}
