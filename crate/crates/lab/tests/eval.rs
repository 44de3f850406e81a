use std::collections::BTreeMap;

use metaens_core::Error;
use metaens_lab::baselines::ScaleMode;
use metaens_lab::config::{ExperimentConfig, Variant};
use metaens_lab::eval::{
    check_protocol, mean_and_spread, plot_sweep, read_reports, render_table, write_reports,
    write_sweep_csv, EvalTuples, MetricsReport, SweepRow,
};

fn report(method: &str, hash: &str) -> MetricsReport {
    MetricsReport {
        method: method.into(),
        dataset: "digits".into(),
        arch: "cnn_tiny".into(),
        acc1: 91.25,
        acc5: 99.5,
        ece: 1.0 / 3.0,
        n_tuples: 2,
        spread: 0.1,
        per_tuple_acc1: vec![91.0, 91.5],
        tuple_hash: hash.into(),
        provenance: BTreeMap::from([("seed".into(), "0".into()), ("config".into(), "abc".into())]),
    }
}

#[test]
fn reports_round_trip_and_share_tuples() {
    let tmp = tempfile::tempdir().unwrap();
    let t = EvalTuples::new(vec![
        vec!["a".into(), "b".into()],
        vec!["c".into(), "d".into()],
    ]);
    assert_eq!(t.hash.len(), 16);
    assert_ne!(
        t.hash,
        EvalTuples::new(vec![vec!["a".into(), "c".into()]]).hash
    );
    let rs = vec![report("wf", &t.hash), report("kd", &t.hash)];
    let path = tmp.path().join("r.csv");
    write_reports(&path, &rs).unwrap();
    assert_eq!(read_reports(&path).unwrap(), rs);
    check_protocol(&rs).unwrap();
    let table = render_table(&rs);
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("| wf | 91.25 ± 0.10 |"));

    let mixed = vec![report("wf", &t.hash), report("kd", "0000000000000000")];
    assert!(matches!(check_protocol(&mixed), Err(Error::Protocol(_))));
}

#[test]
fn spread_is_two_population_deviations() {
    let (m, s) = mean_and_spread(&[1.0, 3.0]);
    assert_eq!((m, s), (2.0, 2.0));
    assert_eq!(mean_and_spread(&[5.0]), (5.0, 0.0));
    assert!(mean_and_spread(&[]).0.is_nan());
}

#[test]
fn sweep_figure_reads_the_stored_table() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = vec![
        SweepRow {
            m: 1,
            mode: ScaleMode::Heuristic,
            acc1: 95.0,
            spread: 1.0,
            n_tuples: 3,
            generator_calls: 0,
        },
        SweepRow {
            m: 3,
            mode: ScaleMode::Heuristic,
            acc1: 96.5,
            spread: 0.5,
            n_tuples: 3,
            generator_calls: 6,
        },
        SweepRow {
            m: 3,
            mode: ScaleMode::Concatenate,
            acc1: 97.0,
            spread: 0.25,
            n_tuples: 3,
            generator_calls: 3,
        },
    ];
    let (csv, svg) = (tmp.path().join("sweep.csv"), tmp.path().join("sweep.svg"));
    write_sweep_csv(&csv, &rows).unwrap();
    assert_eq!(plot_sweep(&csv, &svg).unwrap(), rows);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    write_sweep_csv(&csv, &[]).unwrap();
    assert!(plot_sweep(&csv, &svg).is_err());
}

#[test]
fn config_and_variants_round_trip() {
    let cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(other.hash(), cfg.hash());

    for v in Variant::ALL {
        let mut g = cfg.generator.clone();
        let mut l = cfg.loss.clone();
        v.apply(&mut g, &mut l);
        let changed = (g != cfg.generator) as u8 + (l != cfg.loss) as u8;
        assert_eq!(changed, (v != Variant::Full) as u8, "{}", v.label());
        let s = toml::to_string(&BTreeMap::from([("v", v)])).unwrap();
        let b: BTreeMap<String, Variant> = toml::from_str(&s).unwrap();
        assert_eq!(b["v"], v);
    }
}
