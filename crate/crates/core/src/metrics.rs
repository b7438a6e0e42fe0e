//! Evaluation metrics for transfer trials and parameter comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamVector};

/// One training run, flattened for JSON and CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub system: String,
    pub target: String,
    pub init: String,
    pub optimizer: String,
    pub size: usize,
    pub replicate: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub convergence_time_s: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub source_test_loss: f64,
    pub source_convergence_time_s: f64,
    pub normalized_mse: f64,
    pub normalized_time: f64,
    pub gap: f64,
    pub cosine_similarity: f64,
    pub warnings: usize,
    pub aborted: Option<String>,
    #[serde(default)]
    pub layer_changes: Vec<LayerChange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_params: Option<ParamVector>,
}

pub fn train_test_gap(train_loss: f64, test_loss: f64) -> f64 {
    test_loss - train_loss
}

pub fn normalized_mse(target_test_loss: f64, source_test_loss: f64) -> Result<f64> {
    if source_test_loss > 0.0 {
        Ok(target_test_loss / source_test_loss)
    } else {
        Err(Error::Contract(format!(
            "source test loss must be positive, got {source_test_loss}"
        )))
    }
}

pub fn normalized_convergence_time(target_time: f64, source_time: f64) -> Result<f64> {
    if source_time > 0.0 {
        Ok(target_time / source_time)
    } else {
        Err(Error::Contract(format!(
            "source convergence time must be positive, got {source_time}"
        )))
    }
}

pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    crate::error::check_dim("cosine similarity", a.len(), b.len())?;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Contract("cosine similarity of a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Empirical 1-D Wasserstein-1 distance between two sample sets with uniform
/// weights, as the integral of the absolute difference of the two CDFs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Wasserstein distance needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean over dimensions of the 1-D distances between columns of row-major
/// samples with `dim` columns.
pub fn wasserstein_per_dim(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Contract(format!(
            "sample lengths {} and {} are not multiples of {dim}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for d in 0..dim {
        let ca: Vec<f64> = a.iter().skip(d).step_by(dim).copied().collect();
        let cb: Vec<f64> = b.iter().skip(d).step_by(dim).copied().collect();
        total += wasserstein_1d(&ca, &cb)?;
    }
    Ok(total / dim as f64)
}

pub const HISTOGRAM_EDGES: [f64; 7] = [0.0, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Summary of `|final − source|` within one layer. `histogram[k]` counts
/// entries in `[HISTOGRAM_EDGES[k], HISTOGRAM_EDGES[k+1])`, with everything at
/// or above the last edge in the final bucket and exact zeros in bucket 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChange {
    pub layer: usize,
    pub count: usize,
    pub changed: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub histogram: Vec<usize>,
}

pub fn layer_change_report(
    spec: &NetworkSpec,
    source: &ParamVector,
    fin: &ParamVector,
) -> Result<Vec<LayerChange>> {
    source.check(spec)?;
    fin.check(spec)?;
    let report = spec
        .layer_ranges()
        .into_iter()
        .enumerate()
        .map(|(layer, range)| {
            let mut histogram = vec![0; HISTOGRAM_EDGES.len()];
            let (mut sum, mut max, mut changed) = (0.0, 0.0f64, 0);
            for i in range.clone() {
                let d = (fin[i] - source[i]).abs();
                sum += d;
                max = max.max(d);
                if d != 0.0 {
                    changed += 1;
                }
                let bucket = HISTOGRAM_EDGES.iter().rposition(|&e| d >= e).unwrap_or(0);
                histogram[bucket] += 1;
            }
            LayerChange {
                layer,
                count: range.len(),
                changed,
                mean_abs: sum / range.len() as f64,
                max_abs: max,
                histogram,
            }
        })
        .collect();
    Ok(report)
}
