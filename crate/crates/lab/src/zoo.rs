//! The teacher pool: trained checkpoints on disk plus their manifests.
//!
//! Layout: `<root>/<dataset>/<arch>/pool.toml` and one directory per
//! checkpoint, `<root>/<dataset>/<arch>/<id>/{weights.safetensors,manifest.toml}`.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use metaens_core::arch::ArchSpec;
use metaens_core::weights::WeightSet;
use metaens_core::{rng, Error, Result, Scalar};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::fit::{accuracy, fit, FitConfig, Objective};
use crate::io::{arch_fingerprint, load_weights, read_toml, save_weights, write_toml};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Eval,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub id: String,
    pub arch_fingerprint: String,
    pub seed: u64,
    pub hparams: FitConfig,
    pub val_acc: f64,
    /// Relative to the pool directory.
    pub path: String,
    pub split: SplitTag,
}

/// Hyperparameter grid; checkpoint `i` takes combination `i mod |grid|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HParamGrid {
    pub lrs: Vec<f64>,
    pub augment: Vec<bool>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for HParamGrid {
    fn default() -> Self {
        Self {
            lrs: vec![3e-3, 5e-3],
            augment: vec![false, true],
            epochs: 20,
            batch_size: 50,
            weight_decay: 0.0,
        }
    }
}

impl HParamGrid {
    pub fn combos(&self) -> Vec<FitConfig> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &augment in &self.augment {
                out.push(FitConfig {
                    lr,
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    weight_decay: self.weight_decay,
                    augment,
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub pool_size: usize,
    pub n_train: usize,
    pub grid: HParamGrid,
    pub seed: u64,
}

/// Manifest index of a pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherPool {
    pub dataset: String,
    pub arch: ArchSpec,
    pub spec: PoolSpec,
    pub manifests: Vec<CheckpointManifest>,
    #[serde(skip)]
    pub dir: PathBuf,
}

/// A loaded teacher.
#[derive(Clone, Debug)]
pub struct Teacher<T> {
    pub id: String,
    pub weights: WeightSet<T>,
}

/// Record of every checkpoint load, used to prove that evaluation
/// checkpoints stay unread during training.
#[derive(Debug, Default)]
pub struct AccessLog {
    entries: Mutex<Vec<(String, SplitTag)>>,
}

impl AccessLog {
    pub fn record(&self, id: &str, split: SplitTag) {
        self.entries
            .lock()
            .expect("access log")
            .push((id.to_string(), split));
    }

    pub fn entries(&self) -> Vec<(String, SplitTag)> {
        self.entries.lock().expect("access log").clone()
    }

    pub fn touched(&self, split: SplitTag) -> Vec<String> {
        self.entries()
            .into_iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id)
            .collect()
    }
}

pub fn pool_dir(root: &Path, dataset: &str, arch: &ArchSpec) -> PathBuf {
    root.join(dataset).join(&arch.name)
}

const MAX_RETRIES: u64 = 3;

/// Trains `pool_size` teachers with seeds and grid points derived from
/// `spec.seed`, writes them, and assigns the train/eval split by a seeded
/// shuffle. Checkpoints are trained on up to `jobs` threads; the result
/// does not depend on `jobs`.
pub fn build_pool<T: Scalar>(
    root: &Path,
    data: &Dataset<T>,
    arch: Arc<ArchSpec>,
    spec: PoolSpec,
    jobs: usize,
) -> Result<TeacherPool> {
    if spec.n_train == 0 || spec.n_train >= spec.pool_size {
        return Err(Error::config(format!(
            "pool of {} needs 0 < n_train < pool_size, got n_train {}",
            spec.pool_size, spec.n_train
        )));
    }
    let combos = spec.grid.combos();
    if combos.is_empty() {
        return Err(Error::config("hyperparameter grid is empty"));
    }
    let dir = pool_dir(root, &data.name, &arch);
    let mut order: Vec<usize> = (0..spec.pool_size).collect();
    order.shuffle(&mut rng::stream(spec.seed, "zoo-split"));
    let jobs = jobs.clamp(1, spec.pool_size);
    let train_one = |i: usize| -> Result<CheckpointManifest> {
        let split = if order.iter().position(|&k| k == i).expect("permutation") < spec.n_train {
            SplitTag::Train
        } else {
            SplitTag::Eval
        };
        train_checkpoint(&dir, data, &arch, &spec, &combos, i, split)
    };
    let mut slots: Vec<Option<Result<CheckpointManifest>>> =
        (0..spec.pool_size).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let train_one = &train_one;
                s.spawn(move || {
                    (w..spec.pool_size)
                        .step_by(jobs)
                        .map(|i| (i, train_one(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("pool worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let manifests = slots
        .into_iter()
        .map(|r| r.expect("every checkpoint is assigned"))
        .collect::<Result<Vec<_>>>()?;
    let pool = TeacherPool {
        dataset: data.name.clone(),
        arch: (*arch).clone(),
        spec,
        manifests,
        dir: dir.clone(),
    };
    write_toml(&dir.join("pool.toml"), &pool)?;
    Ok(pool)
}

fn train_checkpoint<T: Scalar>(
    dir: &Path,
    data: &Dataset<T>,
    arch: &Arc<ArchSpec>,
    spec: &PoolSpec,
    combos: &[FitConfig],
    i: usize,
    split: SplitTag,
) -> Result<CheckpointManifest> {
    let hp = combos[i % combos.len()].clone();
    let id = format!("t{i:03}");
    let chance = 100.0 / data.num_classes as f64;
    let mut accepted = None;
    for attempt in 0..=MAX_RETRIES {
        let seed = spec.seed.wrapping_mul(1_000_003) ^ ((i as u64) << 8 | attempt);
        let init = WeightSet::init(arch.clone(), &mut rng::stream(seed, "zoo-init"));
        match fit(
            init,
            data,
            &hp,
            Objective::Labels,
            &mut rng::stream(seed, "zoo-fit"),
        ) {
            Ok(r) if r.val_acc > chance + 2.0 => {
                accepted = Some((seed, r));
                break;
            }
            Ok(_) | Err(Error::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let (seed, r) = accepted.ok_or_else(|| {
        Error::NonFinite(format!(
            "teacher {id} failed to train after {} attempts",
            MAX_RETRIES + 1
        ))
    })?;
    let rel = format!("{id}/weights.safetensors");
    save_weights(&dir.join(&rel), &r.weights)?;
    let m = CheckpointManifest {
        id: id.clone(),
        arch_fingerprint: arch_fingerprint(arch),
        seed,
        hparams: hp,
        val_acc: r.val_acc,
        path: rel,
        split,
    };
    write_toml(&dir.join(&id).join("manifest.toml"), &m)?;
    Ok(m)
}

impl TeacherPool {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut pool: TeacherPool = read_toml(&dir.join("pool.toml")).map_err(|e| {
            Error::Config(format!(
                "no teacher pool at {} (run zoo-build first): {e}",
                dir.display()
            ))
        })?;
        pool.dir = dir.to_path_buf();
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        let fp = arch_fingerprint(&self.arch);
        let mut ids: Vec<&str> = self.manifests.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.manifests.len() {
            return Err(Error::structural("pool has duplicate checkpoint ids"));
        }
        if let Some(m) = self.manifests.iter().find(|m| m.arch_fingerprint != fp) {
            return Err(Error::structural(format!(
                "checkpoint {} has a foreign architecture",
                m.id
            )));
        }
        if self.ids(SplitTag::Eval).is_empty() {
            return Err(Error::config("pool has an empty eval split"));
        }
        Ok(())
    }

    pub fn ids(&self, split: SplitTag) -> Vec<String> {
        self.manifests
            .iter()
            .filter(|m| m.split == split)
            .map(|m| m.id.clone())
            .collect()
    }

    pub fn manifest(&self, id: &str) -> Result<&CheckpointManifest> {
        self.manifests
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::config(format!("no checkpoint `{id}` in pool")))
    }

    pub fn load<T: Scalar>(&self, id: &str, log: &AccessLog) -> Result<Teacher<T>> {
        let m = self.manifest(id)?;
        log.record(id, m.split);
        Ok(Teacher {
            id: id.to_string(),
            weights: load_weights(&self.dir.join(&m.path), Arc::new(self.arch.clone()))?,
        })
    }

    pub fn load_split<T: Scalar>(
        &self,
        split: SplitTag,
        log: &AccessLog,
    ) -> Result<Vec<Teacher<T>>> {
        self.ids(split)
            .iter()
            .map(|id| self.load(id, log))
            .collect()
    }
}

/// Draws `n` distinct members of `members` in sampled order.
pub fn sample_teachers<T: Clone>(members: &[T], n: usize, r: &mut rng::Rng) -> Result<Vec<T>> {
    if n == 0 || n > members.len() {
        return Err(Error::config(format!(
            "cannot sample {n} teachers from a split of {}",
            members.len()
        )));
    }
    Ok(sample(r, members.len(), n)
        .into_iter()
        .map(|i| members[i].clone())
        .collect())
}

/// Loads `n` sampled checkpoints of `split` from disk.
pub fn sample_from_pool<T: Scalar>(
    pool: &TeacherPool,
    n: usize,
    split: SplitTag,
    r: &mut rng::Rng,
    log: &AccessLog,
) -> Result<Vec<Teacher<T>>> {
    let ids = sample_teachers(&pool.ids(split), n, r)?;
    ids.iter().map(|id| pool.load(id, log)).collect()
}

/// Re-evaluates a stored checkpoint on the validation split.
pub fn reevaluate<T: Scalar>(
    pool: &TeacherPool,
    id: &str,
    data: &Dataset<T>,
    log: &AccessLog,
) -> Result<f64> {
    accuracy(&pool.load::<T>(id, log)?.weights, &data.val)
}
