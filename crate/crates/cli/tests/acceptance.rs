//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 4 5`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use metaens_core::arch::{build_arch, ArchSpec, KindTag, LayerSpec};
use metaens_core::autograd::{central_difference, Graph};
use metaens_core::codec::{
    apply_norm, detokenize_layer, fit_norm_stats, invert_norm, tokenize_layer, TokenLayout,
};
use metaens_core::generator::{Generator, GeneratorConfig, Mode, WeightGenerator};
use metaens_core::losses::{combined_loss, shift_consistency, LossConfig, PassRngs, Reduction};
use metaens_core::metrics::{acc_topn, ece};
use metaens_core::rng;
use metaens_core::tensor::Tensor;
use metaens_core::weights::{Batch, ParamKey, WeightSet};
use metaens_lab::baselines::{ensemble_predict, train_kd_student};
use metaens_lab::config::{ExperimentConfig, Variant};
use metaens_lab::eval::{evaluate_method, logits_of, run_ablation, EvalTuples, MetricsReport};
use metaens_lab::experiment::{ensure_pool, Experiment};
use metaens_lab::fit::accuracy;
use metaens_lab::training::finetune_unseen;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng as _;

const C1_LAYERS_PER_KIND: usize = 100;
const C1_NORM_REL_TOL: f64 = 1e-6;
const C1_TIME_LIMIT: Duration = Duration::from_secs(60);
const C2_CASES: u32 = 500;
const C3_MIN_COORDS: usize = 20;
const C3_REL_TOL: f64 = 1e-3;
const C3_STEP: f64 = 1e-6;
const C3_TIME_LIMIT: Duration = Duration::from_secs(300);
const C5_SETS: usize = 1000;
const C5_TOL: f64 = 1e-12;
const C6_SEEDS: u64 = 5;
const C6_POOL: usize = 8;
const C6_MIN_WINS: usize = 4;
const C7_MARGIN_OVER_UNTRAINED: f64 = 20.0;
const C7_KD_RATIO: f64 = 0.9;
const C7_TIME_LIMIT: Duration = Duration::from_secs(2 * 3600);
const C8_MIN_WINS: usize = 4;
const C9_SEEDS: u64 = 5;
const C9_SLACK: f64 = 0.3;
const C9_MIN_WINS: usize = 4;

type F = f32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The shared pool and the Full generator trained on it.
struct Pipeline {
    root: tempfile::TempDir,
    exp: Experiment<F>,
    tuples: EvalTuples,
    eval_teachers: BTreeMap<String, WeightSet<F>>,
    untrained: Generator<F>,
    trained: Generator<F>,
    elapsed: Duration,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let root = tempfile::tempdir().expect("tempdir");
        let mut cfg = ExperimentConfig::default();
        cfg.zoo.root = root.path().join("zoo");
        cfg.output_dir = root.path().join("runs");
        let t = Instant::now();
        ensure_pool::<F>(&cfg, 1).expect("zoo build");
        let exp = Experiment::<F>::open(cfg.clone()).expect("open pool");
        let untrained = exp
            .new_generator(&cfg.generator, cfg.seed)
            .expect("generator");
        let trained = exp
            .train_generator(&cfg.generator, &cfg.loss, cfg.seed)
            .expect("training")
            .generator;
        let elapsed = t.elapsed();
        let tuples = EvalTuples::new(
            exp.eval_tuples(cfg.generator.n_teachers, cfg.eval.n_tuples, cfg.seed)
                .expect("eval tuples"),
        );
        let ids: Vec<String> = tuples.tuples.iter().flatten().cloned().collect();
        let eval_teachers = exp.load_teachers(&ids).expect("eval teachers");
        println!("  pipeline ready in {:.1}s", elapsed.as_secs_f64());
        Pipeline {
            root,
            exp,
            tuples,
            eval_teachers,
            untrained,
            trained,
            elapsed,
        }
    })
}

fn score(p: &Pipeline, name: &str, gen: &Generator<F>) -> MetricsReport {
    let data = &p.exp.data;
    evaluate_method(
        name,
        &p.tuples,
        &p.eval_teachers,
        data,
        p.exp.config.eval.bins,
        |ts| {
            let ws: Vec<WeightSet<F>> = ts.iter().map(|t| t.weights.clone()).collect();
            logits_of(&gen.generate_student(&ws, Mode::Eval)?.0, &data.test)
        },
    )
    .expect("scoring")
}

fn randomized(arch: Arc<ArchSpec>, seed: u64) -> WeightSet<f64> {
    let mut ws = WeightSet::<f64>::init(arch, &mut rng::stream(seed, "init"));
    let keys: Vec<ParamKey> = ws.iter().map(|(k, _)| k.clone()).collect();
    let mut r = rng::stream(seed, "values");
    for k in keys {
        let t = Tensor::randn(ws.tensor(&k).unwrap().shape(), 1.0, &mut r);
        ws.set(k, t).unwrap();
    }
    ws
}

fn single_layer(spec: LayerSpec) -> Arc<ArchSpec> {
    Arc::new(ArchSpec {
        name: "single".into(),
        num_classes: 1,
        input_shape: [1, 1, 1],
        layers: vec![spec],
    })
}

fn random_layer(kind: KindTag, r: &mut rng::Rng) -> LayerSpec {
    let mut spec = match kind {
        KindTag::Conv => LayerSpec::conv(
            "l",
            r.random_range(1..6),
            r.random_range(1..9),
            r.random_range(1..17),
        ),
        KindTag::Fc => LayerSpec::fc("l", r.random_range(1..40), r.random_range(1..20)),
        KindTag::Norm => LayerSpec::norm("l", r.random_range(1..33)),
        KindTag::Attention => {
            let heads = r.random_range(1..5);
            let dv = r.random_range(1..6);
            LayerSpec::attention("l", heads, heads * dv, r.random_range(1..6), dv)
        }
    };
    if matches!(kind, KindTag::Conv | KindTag::Fc) && r.random::<bool>() {
        spec = spec.without_bias();
    }
    spec
}

fn c1() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(1, "c1");
    let mut worst_norm = 0.0f64;
    let mut exact = true;
    let mut layers = 0;
    for kind in [
        KindTag::Conv,
        KindTag::Fc,
        KindTag::Norm,
        KindTag::Attention,
    ] {
        for i in 0..C1_LAYERS_PER_KIND {
            let spec = random_layer(kind, &mut r);
            let arch = single_layer(spec.clone());
            let pool: Vec<_> = (0..4)
                .map(|j| randomized(arch.clone(), (i * 4 + j) as u64))
                .collect();
            let ws = &pool[0];
            let tm = tokenize_layer(ws, &spec).unwrap();
            for (role, back) in detokenize_layer(&tm, &spec).unwrap() {
                exact &= &back == ws.get("l", role).unwrap();
            }
            let stats = fit_norm_stats(&pool).unwrap();
            let back = invert_norm(&apply_norm(&tm, &stats).unwrap(), &stats).unwrap();
            let num: f64 = back
                .tokens
                .data()
                .iter()
                .zip(tm.tokens.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let den: f64 = tm.tokens.data().iter().map(|v| v * v).sum();
            worst_norm = worst_norm.max((num / den).sqrt());
            layers += 1;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        exact && worst_norm <= C1_NORM_REL_TOL && elapsed <= C1_TIME_LIMIT,
        format!(
            "{layers} layers, exact={exact}, worst norm rel err {worst_norm:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c2() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: C2_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        1usize..6,
        1usize..17,
        1usize..17,
        any::<bool>(),
        1usize..5,
        1usize..7,
        1usize..7,
        1usize..33,
    );
    let res = runner.run(&strategy, |(k, n_in, n_out, bias, heads, dk, dv, ch)| {
        let mut conv = LayerSpec::conv("c", k, n_in, n_out);
        let mut fc = LayerSpec::fc("f", n_in, n_out);
        if !bias {
            conv = conv.without_bias();
            fc = fc.without_bias();
        }
        let l = TokenLayout::for_layer(&conv);
        prop_assert_eq!(
            (l.seq_len, l.d_layer),
            (n_out, k * k * n_in + bias as usize)
        );
        let l = TokenLayout::for_layer(&fc);
        prop_assert_eq!((l.seq_len, l.d_layer), (n_out, n_in + bias as usize));
        let dt = heads * dv;
        let l = TokenLayout::for_layer(&LayerSpec::attention("a", heads, dt, dk, dv));
        prop_assert_eq!((l.seq_len, l.d_layer), (2 * dk + 2 * dv, heads * dt));
        let l = TokenLayout::for_layer(&LayerSpec::norm("n", ch));
        prop_assert_eq!((l.seq_len, l.d_layer), (ch, 2));
        // the tokenized matrix has exactly the layout's shape
        let ws = randomized(single_layer(conv.clone()), k as u64);
        let tm = tokenize_layer(&ws, &conv).unwrap();
        prop_assert_eq!(
            (tm.seq_len(), tm.d_layer()),
            (n_out, k * k * n_in + bias as usize)
        );
        Ok(())
    });
    outcome(res.is_ok(), format!("{C2_CASES} cases: {res:?}"))
}

fn c3() -> Outcome {
    let t = Instant::now();
    let arch = Arc::new(ArchSpec {
        name: "mlp2".into(),
        num_classes: 4,
        input_shape: [1, 3, 3],
        layers: vec![
            LayerSpec::fc("fc1", 9, 6).relu(),
            LayerSpec::fc("fc2", 6, 4),
        ],
    });
    arch.validate().expect("two-layer arch");
    let teachers: Vec<_> = (0..3)
        .map(|i| WeightSet::<f64>::init(arch.clone(), &mut rng::substream(3, "t", i)))
        .collect();
    let cfg = GeneratorConfig {
        d_model: 8,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 12,
        n_teachers: 3,
        max_teachers: 3,
        cutoff_rate: 0.25,
        ..Default::default()
    };
    let norm = fit_norm_stats(&teachers).unwrap();
    let gen = Generator::new(cfg, arch, norm, &mut rng::stream(3, "gen")).unwrap();
    let batch = Batch::new(
        Tensor::randn(&[5, 1, 3, 3], 1.0, &mut rng::stream(3, "x")),
        vec![0, 1, 2, 3, 1],
    )
    .unwrap();
    let loss_cfg = LossConfig {
        alpha: 0.5,
        ..Default::default()
    };
    // fixed cutoff masks: both passes re-seed their streams on every evaluation
    let eval = |gen: &Generator<f64>, with_grad: bool| {
        let g = Graph::new();
        let vars = gen.register(&g, with_grad);
        let (mut a, mut b) = (rng::stream(3, "pa"), rng::stream(3, "pb"));
        let rngs = PassRngs {
            primary: &mut a,
            shifted: &mut b,
        };
        let out = combined_loss(&g, gen, &vars, &teachers, &batch, &loss_cfg, Some(rngs)).unwrap();
        let grads = with_grad.then(|| g.backward(out.total));
        (g.scalar_value(out.total), grads, vars)
    };
    let (_, grads, vars) = eval(&gen, true);
    let grads = grads.unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut r = rng::stream(3, "coords");
    for (name, t) in gen.params() {
        let an_t = grads.get_or_zeros(vars.get(name).unwrap(), t.shape());
        for _ in 0..2 {
            let i = r.random_range(0..t.numel());
            let num = central_difference(t, i, C3_STEP, |p| {
                let mut g2 = gen.clone();
                g2.params_mut().insert(name.clone(), p.clone());
                eval(&g2, false).0
            });
            let an = an_t.data()[i];
            let scale = an.abs().max(num.abs());
            if scale < 1e-7 {
                continue;
            }
            worst = worst.max((an - num).abs() / scale);
            checked += 1;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        checked >= C3_MIN_COORDS && worst <= C3_REL_TOL && elapsed <= C3_TIME_LIMIT,
        format!(
            "{checked} coordinates, worst rel err {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c4() -> Outcome {
    let arch = Arc::new(build_arch("cnn_tiny", 10, [1, 8, 8]).unwrap());
    let w = WeightSet::<f64>::init(arch.clone(), &mut rng::stream(4, "w"));
    let cfg = GeneratorConfig {
        d_model: 16,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 16,
        n_teachers: 3,
        max_teachers: 3,
        cutoff_rate: 0.0,
        tie_model_ids: true,
        ..Default::default()
    };
    let gen = Generator::new(
        cfg,
        arch,
        fit_norm_stats(std::slice::from_ref(&w)).unwrap(),
        &mut rng::stream(4, "g"),
    )
    .unwrap();
    let same = vec![w; 3];
    let g = Graph::new();
    let vars = gen.register(&g, false);
    let mut values = Vec::new();
    for red in [Reduction::Mean, Reduction::Sum] {
        let (mut a, mut b) = (rng::stream(4, "a"), rng::stream(4, "b"));
        let rngs = PassRngs {
            primary: &mut a,
            shifted: &mut b,
        };
        let l = shift_consistency(&g, &gen, &vars, &same, Some(rngs), red).unwrap();
        values.push(g.scalar_value(l));
    }
    outcome(
        values.iter().all(|&v| v == 0.0),
        format!("consistency (mean, sum) = {values:?}"),
    )
}

/// Class indices ordered by (score desc, index asc).
fn topn_oracle(x: &[Vec<f64>], labels: &[usize], n: usize) -> f64 {
    let hits = x
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let beaten = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
                .count();
            beaten < n
        })
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

fn ece_oracle(conf: &[f64], ok: &[bool], bins: usize) -> f64 {
    let mut groups: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for (&c, &o) in conf.iter().zip(ok) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        let e = groups.entry(b).or_default();
        e.0 += 1.0;
        e.1 += o as u8 as f64;
        e.2 += c;
    }
    let n = conf.len() as f64;
    100.0
        * groups
            .values()
            .map(|(m, hits, cs)| m / n * (hits / m - cs / m).abs())
            .sum::<f64>()
}

fn c5() -> Outcome {
    let mut r = rng::stream(5, "c5");
    let mut worst = 0.0f64;
    for _ in 0..C5_SETS {
        let rows = r.random_range(1..50);
        let cols = r.random_range(2..15);
        let x: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| r.random_range(0..5) as f64 * 0.25)
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
        let t = Tensor::new(vec![rows, cols], x.concat()).unwrap();
        for n in [1, cols.min(5), cols] {
            worst =
                worst.max((acc_topn(&t, &labels, n).unwrap() - topn_oracle(&x, &labels, n)).abs());
        }
        let conf: Vec<f64> = (0..rows).map(|_| r.random::<f64>()).collect();
        let ok: Vec<bool> = (0..rows).map(|_| r.random::<bool>()).collect();
        let bins = r.random_range(1..20);
        worst = worst.max((ece(&conf, &ok, bins).unwrap() - ece_oracle(&conf, &ok, bins)).abs());
    }
    outcome(
        worst <= C5_TOL,
        format!("{C5_SETS} sets, worst abs diff {worst:.1e}"),
    )
}

fn c6() -> Outcome {
    let p = pipeline();
    let ids: Vec<String> = p.exp.pool.manifests.iter().map(|m| m.id.clone()).collect();
    let all = p.exp.load_teachers(&ids).expect("pool");
    let test = &p.exp.data.test;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..C6_SEEDS {
        let group =
            metaens_lab::zoo::sample_teachers(&ids, C6_POOL, &mut rng::stream(seed, "c6")).unwrap();
        let ws: Vec<WeightSet<F>> = group.iter().map(|id| all[id].clone()).collect();
        let single = ws.iter().map(|w| accuracy(w, test).unwrap()).sum::<f64>() / ws.len() as f64;
        let ens = acc_topn(
            &ensemble_predict(&ws, &test.as_batch()).unwrap(),
            &test.labels,
            1,
        )
        .unwrap();
        wins += (ens >= single) as usize;
        lines.push(format!("{ens:.2}/{single:.2}"));
    }
    outcome(
        wins >= C6_MIN_WINS,
        format!(
            "ensemble/mean single over {C6_POOL} teachers: {} ({wins}/{C6_SEEDS})",
            lines.join(", ")
        ),
    )
}

fn c7() -> Outcome {
    let p = pipeline();
    let cfg = &p.exp.config;
    let data = &p.exp.data;
    let untrained = score(p, "untrained", &p.untrained);
    let wf = score(p, "wf", &p.trained);
    let kd = evaluate_method(
        "kd",
        &p.tuples,
        &p.eval_teachers,
        data,
        cfg.eval.bins,
        |ts| {
            let ws: Vec<WeightSet<F>> = ts.iter().map(|t| t.weights.clone()).collect();
            logits_of(
                &train_kd_student(&ws, data, &cfg.eval.kd, cfg.seed)?.weights,
                &data.test,
            )
        },
    )
    .expect("kd");
    let pass = wf.acc1 >= untrained.acc1 + C7_MARGIN_OVER_UNTRAINED
        && wf.acc1 >= C7_KD_RATIO * kd.acc1
        && p.elapsed <= C7_TIME_LIMIT;
    outcome(
        pass,
        format!(
            "WF {:.2} vs untrained {:.2} and KD {:.2} (need {:.2}), pipeline {:.0}s",
            wf.acc1,
            untrained.acc1,
            kd.acc1,
            (untrained.acc1 + C7_MARGIN_OVER_UNTRAINED).max(C7_KD_RATIO * kd.acc1),
            p.elapsed.as_secs_f64()
        ),
    )
}

fn c8() -> Outcome {
    let p = pipeline();
    let cfg = &p.exp.config;
    let test = &p.exp.data.test;
    let mut wins = 0;
    let mut lines = Vec::new();
    for tuple in &p.tuples.tuples {
        let ws: Vec<WeightSet<F>> = tuple.iter().map(|id| p.eval_teachers[id].clone()).collect();
        let before = accuracy(
            &p.trained.generate_student(&ws, Mode::Eval).unwrap().0,
            test,
        )
        .unwrap();
        let mut ft = p.trained.clone();
        finetune_unseen(
            &mut ft,
            &p.eval_teachers,
            tuple,
            cfg.generator.n_teachers,
            &p.exp.data,
            &cfg.train,
            &cfg.loss,
            cfg.seed,
        )
        .expect("finetune");
        let after = accuracy(&ft.generate_student(&ws, Mode::Eval).unwrap().0, test).unwrap();
        wins += (after >= before) as usize;
        lines.push(format!("{after:.2}/{before:.2}"));
    }
    outcome(
        wins >= C8_MIN_WINS,
        format!(
            "WF*/WF per tuple: {} ({wins}/{})",
            lines.join(", "),
            p.tuples.tuples.len()
        ),
    )
}

fn c9() -> Outcome {
    let p = pipeline();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..C9_SEEDS {
        let reps = run_ablation(&p.exp, &Variant::ALL, &p.tuples, seed).expect("ablation");
        let full = reps[0].acc1;
        let best_ablation = reps[1..].iter().map(|r| r.acc1).fold(f64::MIN, f64::max);
        wins += (full >= best_ablation - C9_SLACK) as usize;
        let cells: Vec<String> = reps
            .iter()
            .map(|r| format!("{} {:.2}", r.method, r.acc1))
            .collect();
        println!("  seed {seed}: {}", cells.join(", "));
        lines.push(format!("{full:.2}/{best_ablation:.2}"));
    }
    outcome(
        wins >= C9_MIN_WINS,
        format!(
            "full/best ablation per seed: {} ({wins}/{C9_SEEDS})",
            lines.join(", ")
        ),
    )
}

fn cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_metaens"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn only_dir(parent: &Path, prefix: &str) -> std::path::PathBuf {
    std::fs::read_dir(parent)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .unwrap_or_else(|| panic!("no {prefix} run in {}", parent.display()))
}

fn c10() -> Outcome {
    let p = pipeline();
    let work = p.root.path().join("c10");
    std::fs::create_dir_all(&work).unwrap();
    let mut cfg = p.exp.config.clone();
    cfg.output_dir = work.join("a");
    cfg.train.pretrain_max_steps = 150;
    cfg.train.pretrain_tuples = 10;
    cfg.train.max_steps = 100;
    cfg.save(&work.join("config.toml")).unwrap();
    let run = |cfg_path: &Path, out: &Path| -> Result<(Vec<u8>, Vec<u8>), String> {
        let (c, o) = (cfg_path.to_str().unwrap(), out.to_str().unwrap());
        cli(&["pretrain", "--config", c, "--output-dir", o], &work)?;
        let pre = only_dir(out, "pretrain-");
        let pre_gen = pre.join("generator");
        cli(
            &[
                "train",
                "--config",
                c,
                "--output-dir",
                o,
                "--generator",
                pre_gen.to_str().unwrap(),
            ],
            &work,
        )?;
        let tr = only_dir(out, "train-");
        let read = |d: &Path| std::fs::read(d.join("metrics.csv")).map_err(|e| e.to_string());
        Ok((read(&pre)?, read(&tr)?))
    };
    let first = run(&work.join("config.toml"), &work.join("a"));
    let resolved = first
        .as_ref()
        .ok()
        .map(|_| only_dir(&work.join("a"), "train-").join("config.toml"));
    let second = match resolved {
        Some(r) => run(&r, &work.join("b")),
        None => Err("first run failed".into()),
    };
    match (first, second) {
        (Ok(a), Ok(b)) => outcome(
            a == b && !a.1.is_empty(),
            format!(
                "pretrain log {} bytes identical={}, train log {} bytes identical={}",
                a.0.len(),
                a.0 == b.0,
                a.1.len(),
                a.1 == b.1
            ),
        ),
        (a, b) => outcome(false, format!("cli failure: {:?} / {:?}", a.err(), b.err())),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "codec round-trip", c1),
        (2, "shape law", c2),
        (3, "combined-loss gradient check", c3),
        (4, "shift consistency vanishes", c4),
        (5, "metric oracles", c5),
        (6, "ensemble beats mean single", c6),
        (7, "WF on unseen tuples", c7),
        (8, "WF* not below WF", c8),
        (9, "full vs ablations", c9),
        (10, "reproducible logs", c10),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "{} C{id} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
