//! Evaluation and analysis quantities.

use ndarray::{Array1, Axis};
use serde::Serialize;

use crate::autodiff::{softmax_rows, Matrix, Tensor};
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::losses;
use crate::models::Model;

pub const DEFAULT_CORRELATION_TEMPERATURE: f64 = 4.0;
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.1;

/// Fraction of rows whose label ranks among the `k` largest logits.
/// Equal logits rank the lower class index first.
pub fn topk_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let c = logits.ncols();
    if k == 0 || k > c {
        bail!(InvalidArgument, "k must lie in 1..={c}, got {k}");
    }
    if labels.len() != logits.nrows() {
        bail!(Shape, "{} labels for {} rows", labels.len(), logits.nrows());
    }
    if labels.is_empty() {
        bail!(InvalidArgument, "top-k accuracy of an empty set");
    }
    let mut hits = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y >= c {
            bail!(InvalidInput, "label {y} out of range for {c} classes");
        }
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Number of classes with probability strictly above `threshold`.
pub fn correlation_number(p: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(InvalidArgument, "threshold must lie in (0, 1), got {threshold}");
    }
    if p.is_empty() || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        bail!(InvalidInput, "correlation_number needs a probability distribution");
    }
    Ok(p.iter().filter(|&&x| x > threshold).count())
}

fn softened(model: &Model, features: &Matrix, temperature: f64) -> Result<Matrix> {
    let logits = Tensor::constant(model.predict(features)?);
    Ok(softmax_rows(&logits, temperature)?.to_array())
}

/// Mean correlation number of `softmax(y/T)` over a dataset.
pub fn mean_correlation_number(model: &Model, ds: &Dataset, temperature: f64, threshold: f64) -> Result<f64> {
    if ds.is_empty() {
        bail!(InvalidArgument, "mean_correlation_number of an empty dataset");
    }
    let p = softened(model, &ds.features, temperature)?;
    let mut total = 0usize;
    for row in p.rows() {
        total += correlation_number(row.as_slice().expect("standard layout"), threshold)?;
    }
    Ok(total as f64 / ds.len() as f64)
}

/// Mean output entropy of `softmax(y/T)` over a dataset.
pub fn mean_entropy(model: &Model, ds: &Dataset, temperature: f64) -> Result<f64> {
    if ds.is_empty() {
        bail!(InvalidArgument, "mean_entropy of an empty dataset");
    }
    let p = Tensor::constant(softened(model, &ds.features, temperature)?);
    Ok(losses::entropy(&p)?.item())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccumulationProfile {
    pub class_index: usize,
    pub temperature: f64,
    /// Per output class, the max softened probability over the class's samples.
    pub profile: Vec<f64>,
    /// Per output class, the mean softened probability (for reference).
    pub mean: Vec<f64>,
}

impl AccumulationProfile {
    /// Output classes other than `class_index` whose peak exceeds `threshold`.
    pub fn secondary_peaks(&self, threshold: f64) -> Vec<usize> {
        self.profile
            .iter()
            .enumerate()
            .filter(|&(c, &v)| c != self.class_index && v > threshold)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Per-class maximum of `softmax(y/T)` over every sample of `class_index`.
pub fn class_accumulation(model: &Model, ds: &Dataset, class_index: usize, temperature: f64) -> Result<AccumulationProfile> {
    let rows = ds.class_rows(class_index);
    if rows.nrows() == 0 {
        bail!(InvalidArgument, "class {class_index} has no samples");
    }
    let p = softened(model, &rows, temperature)?;
    let profile: Array1<f64> = p.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b));
    let mean = p.mean_axis(Axis(0)).expect("non-empty");
    Ok(AccumulationProfile { class_index, temperature, profile: profile.to_vec(), mean: mean.to_vec() })
}

/// Top-1 and top-min(5, C) accuracy of a model on a dataset.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(f64, f64)> {
    let logits = model.predict(&ds.features)?;
    let k5 = 5.min(logits.ncols());
    Ok((topk_accuracy(&logits, &ds.labels, 1)?, topk_accuracy(&logits, &ds.labels, k5)?))
}
