#![allow(dead_code)]

use std::path::Path;

use metaens_core::generator::GeneratorConfig;
use metaens_lab::config::ExperimentConfig;
use metaens_lab::experiment::{ensure_pool, Experiment};

/// A pool of 8 briefly trained teachers and a tiny generator, sized for tests.
pub fn small_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.zoo.root = root.join("zoo");
    cfg.output_dir = root.join("runs");
    cfg.zoo.pool_size = 8;
    cfg.zoo.n_train = 5;
    cfg.zoo.grid.epochs = 3;
    cfg.generator = GeneratorConfig {
        d_model: 16,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 16,
        n_teachers: 3,
        max_teachers: 4,
        cutoff_rate: 0.1,
        ..GeneratorConfig::default()
    };
    cfg.train.pretrain_tuples = 3;
    cfg.train.pretrain_max_steps = 12;
    cfg.train.pretrain_eval_every = 4;
    cfg.train.kd_target.fit.epochs = 1;
    cfg.train.reload_interval = 4;
    cfg.train.val_every = 4;
    cfg.train.max_steps = 12;
    cfg.train.patience = 10;
    cfg.train.probe_tuples = 2;
    cfg.train.finetune_max_steps = 6;
    cfg.train.finetune_val_every = 3;
    cfg.eval.n_tuples = 2;
    cfg.eval.kd.fit.epochs = 1;
    cfg.mlp.hidden_cap = 32;
    cfg
}

pub fn small_experiment(root: &Path) -> Experiment<f32> {
    let cfg = small_config(root);
    ensure_pool::<f32>(&cfg, 2).unwrap();
    Experiment::open(cfg).unwrap()
}
