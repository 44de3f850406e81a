//! The desk dataset: 8×8 grey-scale digits, ten classes.
//!
//! The split is fixed once (seeded shuffle, independent of any experiment
//! seed) so every method is scored on the same test images.

use std::io::Read;

use flate2::read::GzDecoder;
use metaens_core::weights::Batch;
use metaens_core::{rng, Error, Result, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

const DIGITS_GZ: &[u8] = include_bytes!("../data/digits.csv.gz");
const SPLIT_SEED: u64 = 0x5eed_d161;

pub const TRAIN: usize = 1000;
pub const VAL: usize = 300;

#[derive(Clone, Debug)]
pub struct Split<T> {
    /// `[n, 1, 8, 8]`, scaled to `[0, 1]`.
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_batch(&self) -> Batch<T> {
        Batch::new(self.inputs.clone(), self.labels.clone()).expect("split is a valid batch")
    }

    /// Rows `idx` as one batch.
    pub fn gather(&self, idx: &[usize]) -> Batch<T> {
        let s = self.inputs.shape();
        let per: usize = s[1..].iter().product();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        Batch::new(
            Tensor::new(shape, data).expect("gather shape"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
        .expect("non-empty gather")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub name: String,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub train: Split<T>,
    pub val: Split<T>,
    pub test: Split<T>,
}

/// Loads a dataset by name. Only `digits` is bundled.
pub fn load<T: Scalar>(name: &str) -> Result<Dataset<T>> {
    match name {
        "digits" => digits(),
        other => Err(Error::config(format!(
            "unknown dataset `{other}` (available: digits)"
        ))),
    }
}

fn digits<T: Scalar>() -> Result<Dataset<T>> {
    let mut text = String::new();
    GzDecoder::new(DIGITS_GZ)
        .read_to_string(&mut text)
        .map_err(|e| Error::config(format!("bundled digits archive unreadable: {e}")))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::config(format!("digits csv: {e}")))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("digits csv: {e}")))?;
        if vals.len() != 65 {
            return Err(Error::config(format!(
                "digits row has {} fields",
                vals.len()
            )));
        }
        rows.push((
            vals[..64].iter().map(|v| v / 16.0).collect(),
            vals[64] as usize,
        ));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng::stream(SPLIT_SEED, "digits-split"));
    let make = |idx: &[usize]| -> Result<Split<T>> {
        let mut data = Vec::with_capacity(idx.len() * 64);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend(rows[i].0.iter().map(|&v| T::from_f64_lossy(v)));
            labels.push(rows[i].1);
        }
        Ok(Split {
            inputs: Tensor::new(vec![idx.len(), 1, 8, 8], data)?,
            labels,
        })
    };
    Ok(Dataset {
        name: "digits".into(),
        num_classes: 10,
        input_shape: [1, 8, 8],
        train: make(&order[..TRAIN])?,
        val: make(&order[TRAIN..TRAIN + VAL])?,
        test: make(&order[TRAIN + VAL..])?,
    })
}

/// Shifts every image by up to one pixel in each direction (zero fill).
pub fn augment<T: Scalar>(batch: &Batch<T>, r: &mut rng::Rng) -> Batch<T> {
    let s = batch.inputs.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let src = batch.inputs.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..s[0] {
        let dy = r.random_range(-1i64..=1);
        let dx = r.random_range(-1i64..=1);
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        out[base + (y as usize) * w + x as usize] =
                            src[base + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Batch::new(
        Tensor::new(s, out).expect("same shape"),
        batch.labels.clone(),
    )
    .expect("same labels")
}
