//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every stage reads an [`ExperimentConfig`] (TOML, `--config`; built-in
//! desk defaults otherwise) and writes its outputs to
//! `<output_dir>/<stage>-<config hash>-s<seed>/` together with the resolved
//! config, the seed, and a build fingerprint.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaens_core::generator::{Generator, Mode, WeightGenerator};
use metaens_core::weights::WeightSet;
use metaens_core::{Error, Result};
use metaens_lab::baselines::{ensemble_predict, train_kd_student, ScaleMode};
use metaens_lab::config::{ExperimentConfig, Variant};
use metaens_lab::eval::{
    check_protocol, evaluate_method, logits_of, plot_sweep, read_reports, render_table,
    run_ablation, teacher_count_sweep, write_reports, write_sweep_csv, EvalTuples, MetricsReport,
    SweepGenerators,
};
use metaens_lab::experiment::{ensure_pool, Experiment};
use metaens_lab::fit::{accuracy, split_logits};
use metaens_lab::io::{
    load_generator, load_weights, save_generator, save_weights, write_atomic, write_toml,
};
use metaens_lab::training::{finetune_unseen, save_run, write_log};
use metaens_lab::zoo::HParamGrid;
use serde::Serialize;

/// Precision of every command.
type F = f32;

#[derive(Parser, Debug)]
#[command(
    name = "metaens",
    version,
    about = "Generate a student network's weights from several teachers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML). Built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineKind {
    Single,
    Ensemble,
    Kd,
    Mlp,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher pool and write checkpoints with manifests.
    ZooBuild {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        pool_size: Option<usize>,
        /// Train:eval counts, e.g. `32:8`.
        #[arg(long)]
        split: Option<String>,
        /// TOML file with a hyperparameter grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// L2 pretraining of a fresh generator on per-tuple KD students.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Main training stage from a pretrained generator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding the pretrained generator.
        #[arg(long)]
        generator: PathBuf,
    },
    /// Fine-tune a trained generator on pinned unseen teachers (WF*).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generator: PathBuf,
        /// Comma-separated eval-split checkpoint ids.
        #[arg(long, value_delimiter = ',')]
        teachers: Vec<String>,
    },
    /// Generate one student checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generator: PathBuf,
        /// Checkpoint ids in the pool, or paths to `.safetensors` files.
        #[arg(long, value_delimiter = ',')]
        teachers: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a reference method on the shared eval tuples.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        method: BaselineKind,
    },
    /// Score several methods on the shared eval tuples and render a table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trained generator (required for `wf` and `wf_star`).
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "single,ensemble,kd,wf")]
        methods: Vec<String>,
        /// Existing report CSVs to merge; their tuple hash must match.
        #[arg(long, value_delimiter = ',')]
        include: Vec<PathBuf>,
    },
    /// Retrain one generator per ablation variant and score them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Subset of full, no_cross_layer, no_shift_consistency, no_weight_cutoff.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Accuracy against the number of teachers for each scaling mode.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Generator used for one-pass concatenation.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Generator trained with two teachers, used for the heuristic fold.
        #[arg(long)]
        pair_generator: Option<PathBuf>,
    },
    /// Render report CSVs as one comparison table.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status of each failure class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Structural(_) => 3,
        Error::Capacity(_) => 4,
        Error::Protocol(_) => 5,
        Error::NonFinite(_) => 6,
    }
}

/// Parses `argv` (including the program name), runs the stage, and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct BuildInfo {
    package: &'static str,
    version: &'static str,
    dtype: &'static str,
    debug_assertions: bool,
    target_arch: &'static str,
    target_os: &'static str,
}

#[derive(Serialize)]
struct Seeds {
    global: u64,
    zoo: u64,
    streams: Vec<&'static str>,
}

/// Creates the run directory and writes the resolved config, seeds and
/// build fingerprint into it.
fn run_dir(cfg: &ExperimentConfig, stage: &str) -> Result<PathBuf> {
    let dir = cfg
        .output_dir
        .join(format!("{stage}-{}-s{}", cfg.hash(), cfg.seed));
    std::fs::create_dir_all(&dir).map_err(|e| Error::config(format!("{}: {e}", dir.display())))?;
    cfg.save(&dir.join("config.toml"))?;
    write_toml(
        &dir.join("seeds.toml"),
        &Seeds {
            global: cfg.seed,
            zoo: cfg.zoo.seed,
            streams: vec![
                "init",
                "pretrain-tuples",
                "probe-tuples",
                "eval-tuples-<n>",
                "<stage>/sampler",
                "<stage>/batch",
                "<stage>/cutoff-a",
                "<stage>/cutoff-b",
            ],
        },
    )?;
    write_toml(
        &dir.join("build.toml"),
        &BuildInfo {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            dtype: "f32",
            debug_assertions: cfg!(debug_assertions),
            target_arch: std::env::consts::ARCH,
            target_os: std::env::consts::OS,
        },
    )?;
    Ok(dir)
}

fn provenance(
    cfg: &ExperimentConfig,
    stage: &str,
    extra: &[(&str, String)],
) -> BTreeMap<String, String> {
    let mut m = BTreeMap::from([
        ("stage".to_string(), stage.to_string()),
        ("config".to_string(), cfg.hash()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);
    for (k, v) in extra {
        m.insert(k.to_string(), v.clone());
    }
    m
}

fn open_generator(dir: &Path, exp: &Experiment<F>) -> Result<Generator<F>> {
    let (gen, _) = load_generator::<F>(dir).map_err(|e| {
        Error::config(format!(
            "cannot read generator at {} ({e}); run `pretrain` or `train` first",
            dir.display()
        ))
    })?;
    if **gen.arch() != *exp.arch {
        return Err(Error::structural(format!(
            "generator at {} was built for `{}`, the config uses `{}`",
            dir.display(),
            gen.arch().name,
            exp.arch.name
        )));
    }
    Ok(gen)
}

fn shared_tuples(exp: &Experiment<F>) -> Result<(EvalTuples, BTreeMap<String, WeightSet<F>>)> {
    let cfg = &exp.config;
    let tuples =
        EvalTuples::new(exp.eval_tuples(cfg.generator.n_teachers, cfg.eval.n_tuples, cfg.seed)?);
    let ids: Vec<String> = tuples.tuples.iter().flatten().cloned().collect();
    let teachers = exp.load_teachers(&ids)?;
    Ok((tuples, teachers))
}

fn finish_report(mut r: MetricsReport, exp: &Experiment<F>, stage: &str) -> MetricsReport {
    r.arch = exp.arch.name.clone();
    r.provenance = provenance(&exp.config, stage, &[]);
    r
}

fn weights_of(ts: &[metaens_lab::zoo::Teacher<F>]) -> Vec<WeightSet<F>> {
    ts.iter().map(|t| t.weights.clone()).collect()
}

fn score_method(
    exp: &Experiment<F>,
    method: &str,
    tuples: &EvalTuples,
    teachers: &BTreeMap<String, WeightSet<F>>,
    gen: Option<&Generator<F>>,
) -> Result<MetricsReport> {
    let cfg = &exp.config;
    let data = &exp.data;
    let bins = cfg.eval.bins;
    let need_gen =
        || gen.ok_or_else(|| Error::config(format!("method `{method}` needs --generator")));
    let r = match method {
        "single" => evaluate_method(method, tuples, teachers, data, bins, |ts| {
            ts.iter()
                .map(|t| split_logits(&t.weights, &data.test))
                .collect()
        })?,
        "ensemble" => evaluate_method(method, tuples, teachers, data, bins, |ts| {
            Ok(vec![ensemble_predict(
                &weights_of(ts),
                &data.test.as_batch(),
            )?])
        })?,
        "kd" => evaluate_method(method, tuples, teachers, data, bins, |ts| {
            let kd = train_kd_student(&weights_of(ts), data, &cfg.eval.kd, cfg.seed)?;
            logits_of(&kd.weights, &data.test)
        })?,
        "wf" => {
            let g = need_gen()?;
            evaluate_method(method, tuples, teachers, data, bins, |ts| {
                logits_of(
                    &g.generate_student(&weights_of(ts), Mode::Eval)?.0,
                    &data.test,
                )
            })?
        }
        "wf_star" => {
            let g = need_gen()?;
            evaluate_method(method, tuples, teachers, data, bins, |ts| {
                let ids: Vec<String> = ts.iter().map(|t| t.id.clone()).collect();
                let mut ft = g.clone();
                finetune_unseen(
                    &mut ft,
                    teachers,
                    &ids,
                    g.config().n_teachers,
                    data,
                    &cfg.train,
                    &cfg.loss,
                    cfg.seed,
                )?;
                logits_of(
                    &ft.generate_student(&weights_of(ts), Mode::Eval)?.0,
                    &data.test,
                )
            })?
        }
        "mlp" => {
            let mlp = exp.train_mlp(cfg.seed)?.generator;
            evaluate_method(method, tuples, teachers, data, bins, |ts| {
                logits_of(
                    &mlp.generate_student(&weights_of(ts), Mode::Eval)?.0,
                    &data.test,
                )
            })?
        }
        other => {
            return Err(Error::config(format!(
                "unknown method `{other}` (single, ensemble, kd, mlp, wf, wf_star)"
            )))
        }
    };
    Ok(finish_report(r, exp, method))
}

fn parse_variant(s: &str) -> Result<Variant> {
    let norm = s.trim().trim_start_matches('-').replace('-', "_");
    Variant::ALL
        .into_iter()
        .find(|v| {
            let tag = toml::Value::try_from(v).ok();
            tag.as_ref().and_then(|t| t.as_str()) == Some(norm.as_str())
                || v.label().trim_start_matches('-') == norm
        })
        .ok_or_else(|| Error::config(format!("unknown ablation variant `{s}`")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::ZooBuild {
            common,
            dataset,
            arch,
            pool_size,
            split,
            grid,
            jobs,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(a) = arch {
                cfg.arch = a;
            }
            if let Some(n) = pool_size {
                cfg.zoo.pool_size = n;
            }
            if let Some(s) = split {
                let (a, b) = s
                    .split_once(':')
                    .and_then(|(a, b)| {
                        Some((
                            a.trim().parse::<usize>().ok()?,
                            b.trim().parse::<usize>().ok()?,
                        ))
                    })
                    .ok_or_else(|| {
                        Error::config(format!("--split expects `train:eval`, got `{s}`"))
                    })?;
                cfg.zoo.n_train = a;
                if pool_size.is_none() {
                    cfg.zoo.pool_size = a + b;
                } else if a + b != cfg.zoo.pool_size {
                    return Err(Error::config(format!(
                        "--split {s} does not add up to --pool-size {}",
                        cfg.zoo.pool_size
                    )));
                }
            }
            if let Some(g) = grid {
                cfg.zoo.grid = metaens_lab::io::read_toml::<HParamGrid>(&g)?;
            }
            let dir = run_dir(&cfg, "zoo-build")?;
            let pool = ensure_pool::<F>(&cfg, jobs)?;
            write_toml(&dir.join("pool.toml"), &pool)?;
            println!(
                "pool at {}: {} train / {} eval checkpoints",
                pool.dir.display(),
                pool.ids(metaens_lab::zoo::SplitTag::Train).len(),
                pool.ids(metaens_lab::zoo::SplitTag::Eval).len()
            );
            Ok(())
        }
        Command::Pretrain { common } => {
            let cfg = resolve(&common)?;
            let exp = Experiment::<F>::open(cfg.clone())?;
            let dir = run_dir(&cfg, "pretrain")?;
            let mut gen = exp.new_generator(&cfg.generator, cfg.seed)?;
            let st = exp.pretrain(&mut gen, cfg.generator.n_teachers, cfg.seed)?;
            save_run(&dir.join("state"), gen.params(), &st)?;
            write_log(&dir.join("metrics.csv"), &st.log)?;
            let prov = provenance(&cfg, "pretrain", &[("steps", st.step.to_string())]);
            save_generator(&dir.join("generator"), &gen, prov)?;
            println!(
                "pretrained generator at {}",
                dir.join("generator").display()
            );
            Ok(())
        }
        Command::Train { common, generator } => {
            let cfg = resolve(&common)?;
            let exp = Experiment::<F>::open(cfg.clone())?;
            let mut gen = open_generator(&generator, &exp)?;
            let dir = run_dir(&cfg, "train")?;
            let st = exp.train(&mut gen, cfg.generator.n_teachers, &cfg.loss, cfg.seed)?;
            write_log(&dir.join("metrics.csv"), &st.log)?;
            let mut last = gen.clone();
            *last.params_mut() = st.good_params.clone();
            let extra = [
                ("steps", st.step.to_string()),
                ("best_step", st.best_step.to_string()),
                ("best_val", st.best_val.to_string()),
            ];
            save_generator(
                &dir.join("generator"),
                &gen,
                provenance(&cfg, "train-best", &extra),
            )?;
            save_generator(
                &dir.join("generator-last"),
                &last,
                provenance(&cfg, "train-last", &extra),
            )?;
            println!(
                "trained generator at {} (best val {:.2} at step {})",
                dir.join("generator").display(),
                st.best_val,
                st.best_step
            );
            Ok(())
        }
        Command::Finetune {
            common,
            generator,
            teachers,
        } => {
            let cfg = resolve(&common)?;
            let exp = Experiment::<F>::open(cfg.clone())?;
            let mut gen = open_generator(&generator, &exp)?;
            let pool_teachers = exp.load_teachers(&teachers)?;
            let dir = run_dir(&cfg, "finetune")?;
            let n = gen.config().n_teachers;
            let st = finetune_unseen(
                &mut gen,
                &pool_teachers,
                &teachers,
                n,
                &exp.data,
                &cfg.train,
                &cfg.loss,
                cfg.seed,
            )?;
            write_log(&dir.join("metrics.csv"), &st.log)?;
            let prov = provenance(&cfg, "finetune", &[("teachers", teachers.join("+"))]);
            save_generator(&dir.join("generator"), &gen, prov)?;
            println!(
                "fine-tuned generator at {} (val {:.2})",
                dir.join("generator").display(),
                st.best_val
            );
            Ok(())
        }
        Command::Generate {
            common,
            generator,
            teachers,
            out,
        } => {
            let cfg = resolve(&common)?;
            let (gen, _) = load_generator::<F>(&generator)?;
            let mut ws = Vec::with_capacity(teachers.len());
            let mut exp: Option<Experiment<F>> = None;
            for t in &teachers {
                let p = Path::new(t);
                if p.extension().is_some_and(|e| e == "safetensors") && p.exists() {
                    ws.push(load_weights::<F>(p, gen.arch().clone())?);
                } else {
                    if exp.is_none() {
                        exp = Some(Experiment::open(cfg.clone())?);
                    }
                    let e = exp.as_ref().expect("opened above");
                    ws.push(
                        e.load_teachers(std::slice::from_ref(t))?
                            .remove(t)
                            .expect("loaded"),
                    );
                }
            }
            let (student, _) = gen.generate_student(&ws, Mode::Eval)?;
            save_weights(&out, &student)?;
            let data = metaens_lab::data::load::<F>(&cfg.dataset)?;
            println!(
                "student written to {} (test ACC-1 {:.2})",
                out.display(),
                accuracy(&student, &data.test)?
            );
            Ok(())
        }
        Command::Baseline { common, method } => {
            let cfg = resolve(&common)?;
            let exp = Experiment::<F>::open(cfg.clone())?;
            let name = match method {
                BaselineKind::Single => "single",
                BaselineKind::Ensemble => "ensemble",
                BaselineKind::Kd => "kd",
                BaselineKind::Mlp => "mlp",
            };
            let dir = run_dir(&cfg, &format!("baseline-{name}"))?;
            let (tuples, teachers) = shared_tuples(&exp)?;
            let r = score_method(&exp, name, &tuples, &teachers, None)?;
            write_reports(&dir.join("reports.csv"), std::slice::from_ref(&r))?;
            print!("{}", render_table(&[r]));
            Ok(())
        }
        Command::Evaluate {
            common,
            generator,
            methods,
            include,
        } => {
            let cfg = resolve(&common)?;
            let exp = Experiment::<F>::open(cfg.clone())?;
            let gen = generator
                .as_deref()
                .map(|g| open_generator(g, &exp))
                .transpose()?;
            let (tuples, teachers) = shared_tuples(&exp)?;
            let mut reports = Vec::new();
            for p in &include {
                reports.extend(read_reports(p)?);
            }
            check_protocol(&reports)?;
            if let Some(first) = reports.first() {
                if first.tuple_hash != tuples.hash {
                    return Err(Error::Protocol(format!(
                        "included reports were scored on tuples {}, this config uses {}",
                        first.tuple_hash, tuples.hash
                    )));
                }
            }
            let dir = run_dir(&cfg, "evaluate")?;
            for m in &methods {
                reports.push(score_method(
                    &exp,
                    m.trim(),
                    &tuples,
                    &teachers,
                    gen.as_ref(),
                )?);
            }
            check_protocol(&reports)?;
            write_reports(&dir.join("reports.csv"), &reports)?;
            let table = render_table(&reports);
            write_atomic(&dir.join("report.md"), table.as_bytes())?;
            print!("{table}");
            Ok(())
        }
        Command::Ablate {
            common,
            variants,
            seeds,
        } => {
            let cfg = resolve(&common)?;
            let variants = if variants.is_empty() {
                cfg.eval.variants.clone()
            } else {
                variants
                    .iter()
                    .map(|v| parse_variant(v))
                    .collect::<Result<Vec<_>>>()?
            };
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let exp = Experiment::<F>::open(cfg.clone())?;
            let (tuples, _) = shared_tuples(&exp)?;
            let dir = run_dir(&cfg, "ablate")?;
            let mut all = Vec::new();
            for s in seeds {
                let reps = run_ablation(&exp, &variants, &tuples, s)?;
                for mut r in reps {
                    r.method = format!("{} (seed {s})", r.method);
                    all.push(r);
                }
            }
            write_reports(&dir.join("reports.csv"), &all)?;
            let table = render_table(&all);
            write_atomic(&dir.join("report.md"), table.as_bytes())?;
            print!("{table}");
            Ok(())
        }
        Command::Sweep {
            common,
            generator,
            pair_generator,
        } => {
            let cfg = resolve(&common)?;
            let exp = Experiment::<F>::open(cfg.clone())?;
            let concat = generator
                .as_deref()
                .map(|g| open_generator(g, &exp))
                .transpose()?;
            let pair = pair_generator
                .as_deref()
                .map(|g| open_generator(g, &exp))
                .transpose()?;
            let modes: Vec<ScaleMode> = cfg
                .eval
                .modes
                .iter()
                .copied()
                .filter(|m| match m {
                    ScaleMode::Heuristic => pair.is_some(),
                    ScaleMode::Concatenate => concat.is_some(),
                })
                .collect();
            if modes.is_empty() {
                return Err(Error::config(
                    "sweep needs --generator and/or --pair-generator",
                ));
            }
            let eval_ids = exp.pool.ids(metaens_lab::zoo::SplitTag::Eval);
            let teachers = exp.load_teachers(&eval_ids)?;
            let dir = run_dir(&cfg, "sweep")?;
            let rows = teacher_count_sweep(
                &cfg.eval.m_values,
                &modes,
                &SweepGenerators {
                    pair: pair.as_ref(),
                    concat: concat.as_ref(),
                },
                &teachers,
                &exp.data,
                cfg.eval.n_tuples,
                cfg.seed,
            )?;
            write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
            plot_sweep(&dir.join("sweep.csv"), &dir.join("sweep.svg"))?;
            for r in &rows {
                println!(
                    "m={} {:<11} ACC-1 {:.2} ± {:.2}",
                    r.m,
                    r.mode.to_string(),
                    r.acc1,
                    r.spread
                );
            }
            Ok(())
        }
        Command::Report { reports, out } => {
            let mut all = Vec::new();
            for p in &reports {
                all.extend(read_reports(p)?);
            }
            check_protocol(&all)?;
            let table = render_table(&all);
            match out {
                Some(p) => write_atomic(&p, table.as_bytes())?,
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}
