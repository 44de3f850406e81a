//! Top-n accuracy and calibration error, both in percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 15;

/// Rank of class `y` in a row of scores: the number of classes ordered
/// before it. Equal scores are ordered by lower class index.
fn rank_of<T: Scalar>(row: &[T], y: usize) -> usize {
    let s = row[y];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < y))
        .count()
}

/// Share of rows whose label is among the `n` highest scores, × 100.
pub fn acc_topn<T: Scalar>(logits: &Tensor<T>, labels: &[usize], n: usize) -> Result<f64> {
    let (rows, cols) = check_logits(logits, labels)?;
    if n == 0 || n > cols {
        return Err(Error::config(format!(
            "top-{n} accuracy undefined for {cols} classes"
        )));
    }
    let hits = (0..rows)
        .filter(|&i| rank_of(logits.row(i), labels[i]) < n)
        .count();
    Ok(100.0 * hits as f64 / rows as f64)
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::structural(format!(
            "logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let cols = logits.cols();
    if let Some(y) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::structural(format!(
            "label {y} out of range for {cols} classes"
        )));
    }
    Ok((logits.rows(), cols))
}

/// Max softmax probability and the arg-max class (lowest index on ties).
pub fn confidences<T: Scalar>(logits: &Tensor<T>) -> Vec<(f64, usize)> {
    (0..logits.rows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            let (arg, &m) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, (j, v)| {
                    if *v > *best.1 {
                        (j, v)
                    } else {
                        best
                    }
                });
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (1.0 / z, arg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Equal-width reliability bins over `[0, 1]`. Bin `b` holds confidences in
/// `[b/B, (b+1)/B)`; a confidence of exactly 1 lands in the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<Bin>,
}

impl CalibrationBins {
    pub fn compute(conf: &[f64], correct: &[bool], b: usize) -> Result<Self> {
        if conf.is_empty() || conf.len() != correct.len() {
            return Err(Error::structural(format!(
                "{} confidences with {} outcomes",
                conf.len(),
                correct.len()
            )));
        }
        if b == 0 {
            return Err(Error::config("calibration needs at least one bin"));
        }
        if let Some(c) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::structural(format!("confidence {c} outside [0, 1]")));
        }
        let mut sums = vec![(0usize, 0.0f64, 0usize); b];
        for (&c, &ok) in conf.iter().zip(correct) {
            let i = ((c * b as f64) as usize).min(b - 1);
            sums[i].0 += 1;
            sums[i].1 += c;
            sums[i].2 += usize::from(ok);
        }
        let bins = sums
            .into_iter()
            .enumerate()
            .map(|(i, (n, cs, hits))| Bin {
                lo: i as f64 / b as f64,
                hi: (i + 1) as f64 / b as f64,
                count: n,
                mean_confidence: if n > 0 { cs / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits as f64 / n as f64 } else { 0.0 },
            })
            .collect();
        Ok(Self { bins })
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ_b (n_b / n) |acc_b − conf_b|`, × 100.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        100.0
            * self
                .bins
                .iter()
                .filter(|b| b.count > 0)
                .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
                .sum::<f64>()
    }
}

pub fn ece(conf: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    Ok(CalibrationBins::compute(conf, correct, bins)?.ece())
}

/// ECE of raw max-softmax confidences.
pub fn ece_from_logits<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    bins: usize,
) -> Result<f64> {
    check_logits(logits, labels)?;
    let (conf, ok): (Vec<f64>, Vec<bool>) = confidences(logits)
        .into_iter()
        .zip(labels)
        .map(|((c, p), &y)| (c, p == y))
        .unzip();
    ece(&conf, &ok, bins)
}
