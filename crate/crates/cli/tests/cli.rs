use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use metaens_cli::run;
use metaens_core::arch::build_arch;
use metaens_core::codec::NormStats;
use metaens_core::generator::Generator;
use metaens_core::rng;
use metaens_core::weights::WeightSet;
use metaens_lab::config::{desk_generator, ExperimentConfig};
use metaens_lab::eval::{write_reports, MetricsReport};
use metaens_lab::io::{save_generator, save_weights};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("metaens").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small untrained generator for digits / cnn_tiny and `k` teacher files.
fn fixtures(dir: &Path, k: usize) -> Vec<String> {
    let arch = Arc::new(build_arch("cnn_tiny", 10, [1, 8, 8]).unwrap());
    let cfg = metaens_core::generator::GeneratorConfig {
        d_model: 16,
        num_heads: 2,
        ffn_dim: 16,
        ..desk_generator()
    };
    let gen = Generator::<f32>::new(
        cfg,
        arch.clone(),
        NormStats::identity(&arch),
        &mut rng::stream(0, "g"),
    )
    .unwrap();
    save_generator(&dir.join("gen"), &gen, BTreeMap::new()).unwrap();
    (0..k)
        .map(|i| {
            let p = dir.join(format!("t{i}.safetensors"));
            save_weights(
                &p,
                &WeightSet::<f32>::init(arch.clone(), &mut rng::stream(i as u64, "t")),
            )
            .unwrap();
            path(&p).to_string()
        })
        .collect()
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["train"]), 2);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn bad_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "dataset = 3").unwrap();
    assert_eq!(cli(&["pretrain", "--config", path(&cfg)]), 2);
    let mut bad = ExperimentConfig::default();
    bad.train.main_lr = -1.0;
    std::fs::write(&cfg, bad.to_toml()).unwrap();
    assert_eq!(cli(&["pretrain", "--config", path(&cfg)]), 2);
    assert_eq!(
        cli(&[
            "pretrain",
            "--config",
            path(&tmp.path().join("missing.toml"))
        ]),
        2
    );
}

#[test]
fn missing_generator_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none");
    assert_eq!(
        cli(&[
            "generate",
            "--generator",
            path(&missing),
            "--teachers",
            "a,b,c",
            "--out",
            "x"
        ]),
        2
    );
}

#[test]
fn mismatched_report_tuples_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let report = |method: &str, hash: &str| MetricsReport {
        method: method.into(),
        dataset: "digits".into(),
        arch: "cnn_tiny".into(),
        acc1: 90.0,
        acc5: 99.0,
        ece: 1.0,
        n_tuples: 1,
        spread: 0.0,
        per_tuple_acc1: vec![90.0],
        tuple_hash: hash.into(),
        provenance: BTreeMap::new(),
    };
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    write_reports(&a, &[report("wf", "aaaa")]).unwrap();
    write_reports(&b, &[report("kd", "bbbb")]).unwrap();
    let both = format!("{},{}", path(&a), path(&b));
    assert_eq!(cli(&["report", "--reports", &both]), 5);
    let out = tmp.path().join("table.md");
    assert_eq!(
        cli(&["report", "--reports", path(&a), "--out", path(&out)]),
        0
    );
    assert!(std::fs::read_to_string(&out).unwrap().contains("| wf |"));
}

#[test]
fn generation_checks_capacity_and_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let teachers = fixtures(tmp.path(), 5);
    let gen = tmp.path().join("gen");
    let out = tmp.path().join("student.safetensors");
    let run_gen = |ts: &[String]| {
        cli(&[
            "generate",
            "--generator",
            path(&gen),
            "--teachers",
            &ts.join(","),
            "--out",
            path(&out),
        ])
    };
    assert_eq!(run_gen(&teachers[..3]), 0);
    assert!(out.exists());
    assert_eq!(run_gen(&teachers), 4);

    let other = Arc::new(build_arch("mlp_tiny", 10, [1, 8, 8]).unwrap());
    let wrong = tmp.path().join("wrong.safetensors");
    save_weights(
        &wrong,
        &WeightSet::<f32>::init(other, &mut rng::stream(9, "t")),
    )
    .unwrap();
    let mixed = vec![
        teachers[0].clone(),
        teachers[1].clone(),
        path(&wrong).to_string(),
    ];
    assert_eq!(run_gen(&mixed), 3);
}
