//! Wiring of the stages: an opened teacher pool, the dataset, and the
//! seeded recipes that turn an [`ExperimentConfig`] into trained
//! generators and baselines.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use metaens_core::arch::{build_arch, ArchSpec};
use metaens_core::codec::{fit_norm_stats, NormStats};
use metaens_core::generator::{Generator, GeneratorConfig, WeightGenerator};
use metaens_core::losses::LossConfig;
use metaens_core::weights::WeightSet;
use metaens_core::{rng, Error, Result, Scalar};

use crate::baselines::MlpPredictor;
use crate::config::ExperimentConfig;
use crate::data::{load, Dataset};
use crate::training::{kd_targets, pretrain, sample_tuples, train, RunState, Stage, TeacherSource};
use crate::zoo::{build_pool, pool_dir, AccessLog, SplitTag, TeacherPool};

/// A generator after both training stages, with their logs.
pub struct Trained<G, T> {
    pub generator: G,
    pub pretrain: RunState<T>,
    pub train: RunState<T>,
}

pub struct Experiment<T> {
    pub config: ExperimentConfig,
    pub data: Dataset<T>,
    pub arch: Arc<ArchSpec>,
    pub pool: TeacherPool,
    pub access: AccessLog,
    /// Train-split checkpoints, loaded once.
    pub train_teachers: BTreeMap<String, WeightSet<T>>,
    pub norm: NormStats<T>,
}

pub fn load_dataset_and_arch<T: Scalar>(
    cfg: &ExperimentConfig,
) -> Result<(Dataset<T>, Arc<ArchSpec>)> {
    let data = load::<T>(&cfg.dataset)?;
    let arch = Arc::new(build_arch(&cfg.arch, data.num_classes, data.input_shape)?);
    Ok((data, arch))
}

/// Trains and writes the pool unless an identical one already exists.
pub fn ensure_pool<T: Scalar>(cfg: &ExperimentConfig, jobs: usize) -> Result<TeacherPool> {
    let (data, arch) = load_dataset_and_arch::<T>(cfg)?;
    let dir = pool_dir(&cfg.zoo.root, &data.name, &arch);
    if dir.join("pool.toml").exists() {
        let pool = TeacherPool::open(&dir)?;
        if pool.spec == cfg.zoo.pool_spec() {
            return Ok(pool);
        }
        return Err(Error::config(format!(
            "{} holds a pool built with different settings; remove it or point zoo.root elsewhere",
            dir.display()
        )));
    }
    build_pool(&cfg.zoo.root, &data, arch, cfg.zoo.pool_spec(), jobs)
}

impl<T: Scalar> Experiment<T> {
    /// Opens the pool described by `config`; it must have been built.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (data, arch) = load_dataset_and_arch::<T>(&config)?;
        let pool = TeacherPool::open(&pool_dir(&config.zoo.root, &data.name, &arch))?;
        if pool.spec != config.zoo.pool_spec() {
            return Err(Error::config(
                "the pool on disk was built with different zoo settings",
            ));
        }
        if pool.arch != *arch {
            return Err(Error::structural(
                "the pool on disk holds a different architecture",
            ));
        }
        let access = AccessLog::default();
        let train_teachers: BTreeMap<_, _> = pool
            .load_split::<T>(SplitTag::Train, &access)?
            .into_iter()
            .map(|t| (t.id, t.weights))
            .collect();
        let members: Vec<WeightSet<T>> = train_teachers.values().cloned().collect();
        let norm = fit_norm_stats(&members)?;
        Ok(Self {
            config,
            data,
            arch,
            pool,
            access,
            train_teachers,
            norm,
        })
    }

    pub fn train_ids(&self) -> Vec<String> {
        self.train_teachers.keys().cloned().collect()
    }

    pub fn kd_cache_dir(&self) -> PathBuf {
        self.pool.dir.join("kd")
    }

    /// Loads eval-split checkpoints; every read is recorded.
    pub fn load_teachers(&self, ids: &[String]) -> Result<BTreeMap<String, WeightSet<T>>> {
        ids.iter()
            .map(|id| Ok((id.clone(), self.pool.load::<T>(id, &self.access)?.weights)))
            .collect()
    }

    /// The fixed eval-split tuples of size `n` for `seed`.
    pub fn eval_tuples(&self, n: usize, count: usize, seed: u64) -> Result<Vec<Vec<String>>> {
        sample_tuples(
            &self.pool.ids(SplitTag::Eval),
            n,
            count,
            &mut rng::stream(seed, &format!("eval-tuples-{n}")),
        )
    }

    pub fn new_generator(&self, cfg: &GeneratorConfig, seed: u64) -> Result<Generator<T>> {
        Generator::new(
            cfg.clone(),
            self.arch.clone(),
            self.norm.clone(),
            &mut rng::stream(seed, "init"),
        )
    }

    /// L2 pretraining on KD students of `pretrain_tuples` sampled tuples.
    pub fn pretrain<G: WeightGenerator<T>>(
        &self,
        gen: &mut G,
        n_teachers: usize,
        seed: u64,
    ) -> Result<RunState<T>> {
        let cfg = &self.config.train;
        let tuples = sample_tuples(
            &self.train_ids(),
            n_teachers,
            cfg.pretrain_tuples,
            &mut rng::stream(self.config.zoo.seed, "pretrain-tuples"),
        )?;
        let cache = self.kd_cache_dir();
        let targets = kd_targets(
            &self.train_teachers,
            &self.data,
            &tuples,
            &cfg.kd_target,
            Some(&cache),
            self.config.zoo.seed,
        )?;
        let mut st = RunState::new(Stage::Pretrain, seed, gen.params(), cfg);
        pretrain(
            gen,
            &mut st,
            &self.train_teachers,
            &targets,
            cfg,
            usize::MAX,
        )?;
        Ok(st)
    }

    /// Main stage from the generator's current parameters; leaves the
    /// best-validation parameters installed.
    pub fn train<G: WeightGenerator<T>>(
        &self,
        gen: &mut G,
        n_teachers: usize,
        loss: &LossConfig,
        seed: u64,
    ) -> Result<RunState<T>> {
        let cfg = &self.config.train;
        let probe = sample_tuples(
            &self.train_ids(),
            n_teachers,
            cfg.probe_tuples,
            &mut rng::stream(seed, "probe-tuples"),
        )?;
        let source = TeacherSource {
            teachers: &self.train_teachers,
            probe,
            pinned: None,
        };
        let mut st = RunState::new(Stage::Train, seed, gen.params(), cfg);
        train(
            gen,
            &mut st,
            &source,
            n_teachers,
            &self.data,
            cfg,
            loss,
            usize::MAX,
        )?;
        *gen.params_mut() = st.best_params.clone();
        Ok(st)
    }

    /// Fresh generator through both stages.
    pub fn train_generator(
        &self,
        gen_cfg: &GeneratorConfig,
        loss: &LossConfig,
        seed: u64,
    ) -> Result<Trained<Generator<T>, T>> {
        let mut gen = self.new_generator(gen_cfg, seed)?;
        let pre = self.pretrain(&mut gen, gen_cfg.n_teachers, seed)?;
        let st = self.train(&mut gen, gen_cfg.n_teachers, loss, seed)?;
        Ok(Trained {
            generator: gen,
            pretrain: pre,
            train: st,
        })
    }

    /// The MLP baseline: same pretraining, then CE only.
    pub fn train_mlp(&self, seed: u64) -> Result<Trained<MlpPredictor<T>, T>> {
        let cfg = self.config.mlp.clone();
        let n = cfg.n_teachers;
        let mut mlp = MlpPredictor::new(
            cfg,
            self.arch.clone(),
            self.norm.clone(),
            &mut rng::stream(seed, "init"),
        )?;
        let pre = self.pretrain(&mut mlp, n, seed)?;
        let loss = LossConfig {
            alpha: 0.0,
            ..self.config.loss.clone()
        };
        let st = self.train(&mut mlp, n, &loss, seed)?;
        Ok(Trained {
            generator: mlp,
            pretrain: pre,
            train: st,
        })
    }
}
