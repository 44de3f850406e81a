//! The experiment configuration: one TOML file holding every setting of
//! every stage. Each run writes its resolved copy next to its outputs.

use std::path::{Path, PathBuf};

use metaens_core::generator::GeneratorConfig;
use metaens_core::losses::LossConfig;
use metaens_core::Result;
use serde::{Deserialize, Serialize};

use crate::baselines::{KdConfig, MlpConfig, ScaleMode};
use crate::fit::FitConfig;
use crate::io::{read_toml, sha256_hex, write_toml};
use crate::training::TrainConfig;
use crate::zoo::{HParamGrid, PoolSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooSettings {
    pub root: PathBuf,
    pub pool_size: usize,
    pub n_train: usize,
    pub grid: HParamGrid,
    /// Independent of the experiment seed so every run shares one pool.
    pub seed: u64,
}

impl Default for ZooSettings {
    fn default() -> Self {
        Self {
            root: PathBuf::from("zoo"),
            pool_size: 40,
            n_train: 32,
            grid: HParamGrid::default(),
            seed: 1,
        }
    }
}

impl ZooSettings {
    pub fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            pool_size: self.pool_size,
            n_train: self.n_train,
            grid: self.grid.clone(),
            seed: self.seed,
        }
    }
}

/// Ablation variants; `Full` is the reference row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCrossLayer,
    NoShiftConsistency,
    NoWeightCutoff,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoCrossLayer,
        Variant::NoShiftConsistency,
        Variant::NoWeightCutoff,
    ];

    pub fn apply(self, gen: &mut GeneratorConfig, loss: &mut LossConfig) {
        match self {
            Variant::Full => {}
            Variant::NoCrossLayer => gen.cross_layer = false,
            Variant::NoShiftConsistency => loss.alpha = 0.0,
            Variant::NoWeightCutoff => gen.cutoff_rate = 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCrossLayer => "-cross_layer",
            Variant::NoShiftConsistency => "-shift_consistency",
            Variant::NoWeightCutoff => "-weight_cutoff",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Eval-split teacher tuples shared by every method.
    pub n_tuples: usize,
    pub bins: usize,
    /// The KD baseline (random init, trained to convergence).
    pub kd: KdConfig,
    pub m_values: Vec<usize>,
    pub modes: Vec<ScaleMode>,
    pub variants: Vec<Variant>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_tuples: 5,
            bins: metaens_core::metrics::DEFAULT_BINS,
            kd: KdConfig {
                fit: FitConfig {
                    epochs: 30,
                    ..FitConfig::default()
                },
                ..KdConfig::default()
            },
            m_values: vec![1, 2, 3, 4, 5],
            modes: vec![ScaleMode::Heuristic, ScaleMode::Concatenate],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub arch: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub zoo: ZooSettings,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mlp: MlpConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "digits".into(),
            arch: "cnn_tiny".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            zoo: ZooSettings::default(),
            generator: desk_generator(),
            train: TrainConfig::desk(),
            loss: LossConfig::default(),
            mlp: MlpConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Generator size used on the digits pool.
pub fn desk_generator() -> GeneratorConfig {
    GeneratorConfig {
        d_model: 128,
        num_blocks: 1,
        num_heads: 4,
        ffn_dim: 256,
        n_teachers: 3,
        max_teachers: 4,
        cutoff_rate: 0.05,
        ..GeneratorConfig::default()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        if self.eval.n_tuples == 0 {
            return Err(metaens_core::Error::config(
                "eval.n_tuples must be at least 1",
            ));
        }
        Ok(())
    }
}
