//! Scoring methods on shared eval tuples, the component ablation, the
//! teacher-count sweep, and report files.

use std::collections::BTreeMap;
use std::path::Path;

use metaens_core::generator::{Generator, WeightGenerator};
use metaens_core::metrics::{acc_topn, ece_from_logits};
use metaens_core::weights::WeightSet;
use metaens_core::{rng, Error, Result, Scalar, Tensor};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{scale_teachers, ScaleMode};
use crate::config::Variant;
use crate::data::{Dataset, Split};
use crate::experiment::Experiment;
use crate::fit::split_logits;
use crate::io::{sha256_hex, write_atomic};
use crate::training::sample_tuples;
use crate::zoo::Teacher;

/// Tuples every method is scored on, with their fingerprint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTuples {
    pub tuples: Vec<Vec<String>>,
    pub hash: String,
}

impl EvalTuples {
    pub fn new(tuples: Vec<Vec<String>>) -> Self {
        let text: Vec<String> = tuples.iter().map(|t| t.join("+")).collect();
        let hash = sha256_hex(text.join("\n").as_bytes())[..16].to_string();
        Self { tuples, hash }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub arch: String,
    pub acc1: f64,
    pub acc5: f64,
    pub ece: f64,
    pub n_tuples: usize,
    /// Two standard deviations of ACC-1 across tuples.
    pub spread: f64,
    pub per_tuple_acc1: Vec<f64>,
    pub tuple_hash: String,
    pub provenance: BTreeMap<String, String>,
}

/// Population mean and `2σ`.
pub fn mean_and_spread(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, 2.0 * var.sqrt())
}

/// Scores `predict` on every tuple of `tuples`.
///
/// `predict` returns one or more logit tensors for the test split; several
/// tensors (the single-model baseline) are scored separately and averaged
/// within the tuple.
pub fn evaluate_method<T: Scalar>(
    method: &str,
    tuples: &EvalTuples,
    teachers: &BTreeMap<String, WeightSet<T>>,
    data: &Dataset<T>,
    bins: usize,
    mut predict: impl FnMut(&[Teacher<T>]) -> Result<Vec<Tensor<T>>>,
) -> Result<MetricsReport> {
    if tuples.tuples.is_empty() {
        return Err(Error::config("no eval tuples"));
    }
    if EvalTuples::new(tuples.tuples.clone()).hash != tuples.hash {
        return Err(Error::Protocol(
            "eval tuples do not match their recorded hash".into(),
        ));
    }
    let k = 5.min(data.num_classes);
    let (mut a1, mut a5, mut ec) = (Vec::new(), Vec::new(), Vec::new());
    for tuple in &tuples.tuples {
        let members = tuple
            .iter()
            .map(|id| {
                Ok(Teacher {
                    id: id.clone(),
                    weights: teachers
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::config(format!("eval teacher `{id}` not loaded")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outs = predict(&members)?;
        if outs.is_empty() {
            return Err(Error::config(format!(
                "method `{method}` produced no predictions"
            )));
        }
        let m = outs.len() as f64;
        let (mut s1, mut s5, mut se) = (0.0, 0.0, 0.0);
        for l in &outs {
            s1 += acc_topn(l, &data.test.labels, 1)?;
            s5 += acc_topn(l, &data.test.labels, k)?;
            se += ece_from_logits(l, &data.test.labels, bins)?;
        }
        a1.push(s1 / m);
        a5.push(s5 / m);
        ec.push(se / m);
    }
    let (acc1, spread) = mean_and_spread(&a1);
    Ok(MetricsReport {
        method: method.to_string(),
        dataset: data.name.clone(),
        arch: String::new(),
        acc1,
        acc5: mean_and_spread(&a5).0,
        ece: mean_and_spread(&ec).0,
        n_tuples: a1.len(),
        spread,
        per_tuple_acc1: a1,
        tuple_hash: tuples.hash.clone(),
        provenance: BTreeMap::new(),
    })
}

/// Test-split logits of a weight set, as a one-element prediction list.
pub fn logits_of<T: Scalar>(ws: &WeightSet<T>, test: &Split<T>) -> Result<Vec<Tensor<T>>> {
    Ok(vec![split_logits(ws, test)?])
}

/// All reports must come from the same eval tuples.
pub fn check_protocol(reports: &[MetricsReport]) -> Result<()> {
    if let Some(first) = reports.first() {
        if let Some(r) = reports.iter().find(|r| r.tuple_hash != first.tuple_hash) {
            return Err(Error::Protocol(format!(
                "`{}` was scored on tuples {} but `{}` on {}",
                r.method, r.tuple_hash, first.method, first.tuple_hash
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    method: String,
    dataset: String,
    arch: String,
    acc1: f64,
    acc5: f64,
    ece: f64,
    n_tuples: usize,
    spread: f64,
    per_tuple_acc1: String,
    tuple_hash: String,
    provenance: String,
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::config(format!("{}: {e}", path.display()))
}

pub fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        let row = ReportRow {
            method: r.method.clone(),
            dataset: r.dataset.clone(),
            arch: r.arch.clone(),
            acc1: r.acc1,
            acc5: r.acc5,
            ece: r.ece,
            n_tuples: r.n_tuples,
            spread: r.spread,
            per_tuple_acc1: r
                .per_tuple_acc1
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            tuple_hash: r.tuple_hash.clone(),
            provenance: r
                .provenance
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";"),
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| csv_err(path, e))?)
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rd.deserialize::<ReportRow>()
        .map(|row| {
            let r = row.map_err(|e| csv_err(path, e))?;
            let per = r
                .per_tuple_acc1
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| csv_err(path, e)))
                .collect::<Result<Vec<_>>>()?;
            let provenance = r
                .provenance
                .split(';')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            Ok(MetricsReport {
                method: r.method,
                dataset: r.dataset,
                arch: r.arch,
                acc1: r.acc1,
                acc5: r.acc5,
                ece: r.ece,
                n_tuples: r.n_tuples,
                spread: r.spread,
                per_tuple_acc1: per,
                tuple_hash: r.tuple_hash,
                provenance,
            })
        })
        .collect()
}

/// Markdown comparison grid, one row per method.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut s =
        String::from("| Method | ACC-1 (±2σ) | ACC-5 | ECE | tuples |\n|---|---|---|---|---|\n");
    for r in reports {
        s.push_str(&format!(
            "| {} | {:.2} ± {:.2} | {:.2} | {:.2} | {} |\n",
            r.method, r.acc1, r.spread, r.acc5, r.ece, r.n_tuples
        ));
    }
    s
}

/// One generator per variant, trained from scratch (pretraining is shared
/// between variants whose generator settings coincide) and scored on the
/// same eval tuples.
pub fn run_ablation<T: Scalar>(
    exp: &Experiment<T>,
    variants: &[Variant],
    tuples: &EvalTuples,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let ids: Vec<String> = tuples.tuples.iter().flatten().cloned().collect();
    let eval_teachers = exp.load_teachers(&ids)?;
    let mut pretrained: Vec<(metaens_core::generator::GeneratorConfig, Generator<T>)> = Vec::new();
    let mut out = Vec::new();
    for &v in variants {
        let mut gcfg = exp.config.generator.clone();
        let mut loss = exp.config.loss.clone();
        v.apply(&mut gcfg, &mut loss);
        let mut gen = match pretrained.iter().find(|(c, _)| *c == gcfg) {
            Some((_, g)) => g.clone(),
            None => {
                let mut g = exp.new_generator(&gcfg, seed)?;
                exp.pretrain(&mut g, gcfg.n_teachers, seed)?;
                pretrained.push((gcfg.clone(), g.clone()));
                g
            }
        };
        exp.train(&mut gen, gcfg.n_teachers, &loss, seed)?;
        let mut rep = evaluate_method(
            v.label(),
            tuples,
            &eval_teachers,
            &exp.data,
            exp.config.eval.bins,
            |ts| {
                let ws: Vec<WeightSet<T>> = ts.iter().map(|t| t.weights.clone()).collect();
                let (student, _) =
                    gen.generate_student(&ws, metaens_core::generator::Mode::Eval)?;
                logits_of(&student, &exp.data.test)
            },
        )?;
        rep.arch = exp.arch.name.clone();
        rep.provenance.insert("seed".into(), seed.to_string());
        rep.provenance.insert("config".into(), exp.config.hash());
        out.push(rep);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub mode: ScaleMode,
    pub acc1: f64,
    pub spread: f64,
    pub n_tuples: usize,
    pub generator_calls: usize,
}

/// Generators used by the sweep, one per mode.
pub struct SweepGenerators<'a, T> {
    /// Trained with two teachers; drives the heuristic fold.
    pub pair: Option<&'a Generator<T>>,
    /// Any generator; drives one-pass concatenation.
    pub concat: Option<&'a Generator<T>>,
}

/// ACC-1 of [`scale_teachers`] students for each `(m, mode)`. `m = 1` is the
/// single teacher. Cells whose generation exceeds capacity are left out.
pub fn teacher_count_sweep<T: Scalar>(
    m_values: &[usize],
    modes: &[ScaleMode],
    gens: &SweepGenerators<'_, T>,
    teachers: &BTreeMap<String, WeightSet<T>>,
    data: &Dataset<T>,
    n_tuples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let ids: Vec<String> = teachers.keys().cloned().collect();
    let mut rows = Vec::new();
    for &m in m_values {
        let tuples = sample_tuples(
            &ids,
            m,
            n_tuples,
            &mut rng::stream(seed, &format!("sweep-{m}")),
        )?;
        for &mode in modes {
            let gen = match mode {
                ScaleMode::Heuristic => gens.pair,
                ScaleMode::Concatenate => gens.concat,
            };
            let mut accs = Vec::with_capacity(tuples.len());
            let mut calls = 0;
            let mut skipped = false;
            for t in &tuples {
                let members: Vec<Teacher<T>> = t
                    .iter()
                    .map(|id| Teacher {
                        id: id.clone(),
                        weights: teachers[id].clone(),
                    })
                    .collect();
                let student = if m == 1 {
                    members[0].weights.clone()
                } else {
                    let gen = gen.ok_or_else(|| {
                        Error::config(format!("no generator given for {mode} scaling"))
                    })?;
                    match scale_teachers(gen, &members, mode) {
                        Ok(s) => {
                            calls += s.generator_calls;
                            s.student
                        }
                        Err(Error::Capacity(_)) => {
                            skipped = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                };
                accs.push(acc_topn(
                    &split_logits(&student, &data.test)?,
                    &data.test.labels,
                    1,
                )?);
            }
            if skipped {
                continue;
            }
            let (acc1, spread) = mean_and_spread(&accs);
            rows.push(SweepRow {
                m,
                mode,
                acc1,
                spread,
                n_tuples: accs.len(),
                generator_calls: calls,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| csv_err(path, e))?)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rd.deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Plots the sweep CSV at `csv_path` (read back from disk, so the figure
/// shows exactly the stored numbers) as an SVG line chart.
pub fn plot_sweep(csv_path: &Path, svg_path: &Path) -> Result<Vec<SweepRow>> {
    let rows = read_sweep_csv(csv_path)?;
    if rows.is_empty() {
        return Err(Error::config("sweep table is empty"));
    }
    let m_max = rows.iter().map(|r| r.m).max().unwrap_or(1) as f64;
    let lo = rows.iter().map(|r| r.acc1).fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|r| r.acc1)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.5);
    let plot_err =
        |e: &dyn std::fmt::Display| Error::config(format!("{}: {e}", svg_path.display()));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("ACC-1 vs number of teachers", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.5..m_max + 0.5, (lo - pad)..(hi + pad))
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("teachers m")
            .y_desc("ACC-1 (%)")
            .draw()
            .map_err(|e| plot_err(&e))?;
        let palette = [RED, BLUE, GREEN, MAGENTA];
        let mut modes: Vec<ScaleMode> = rows.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        for (i, mode) in modes.iter().enumerate() {
            let color = palette[i % palette.len()];
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.mode == *mode)
                .map(|r| (r.m as f64, r.acc1))
                .collect();
            chart
                .draw_series(LineSeries::new(pts, color))
                .map_err(|e| plot_err(&e))?
                .label(mode.to_string())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    write_atomic(svg_path, svg.as_bytes())?;
    Ok(rows)
}
