//! Mean squared errors on the standardized observation scale, pooled and
//! per instance.

use serde::{Deserialize, Serialize};

use crate::covariates::CovariateMatrix;
use crate::error::{LvaeError, Result};
use crate::nnet::ObservationSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    /// Over all scored entries.
    pub mse: f64,
    /// Mean of per-instance MSEs.
    pub instance_mean: f64,
    /// Standard error of `instance_mean`; 0 with a single instance.
    pub instance_se: f64,
    pub entries: usize,
    pub instances: usize,
}

fn check(pred: &ObservationSet, truth: &ObservationSet, x: &CovariateMatrix) -> Result<()> {
    if pred.len() != truth.len() || pred.dim() != truth.dim() || x.len() != truth.len() {
        return Err(LvaeError::Shape(format!(
            "predictions {}x{}, truth {}x{}, covariates {} rows",
            pred.len(),
            pred.dim(),
            truth.len(),
            truth.dim(),
            x.len()
        )));
    }
    Ok(())
}

/// MSE over the entries selected by `include(row, column)`. Both `pred` and
/// `truth` must hold values at every selected entry.
pub fn mse_where(
    pred: &ObservationSet,
    truth: &ObservationSet,
    x: &CovariateMatrix,
    include: impl Fn(usize, usize) -> bool,
) -> Result<MseReport> {
    check(pred, truth, x)?;
    let mut total = 0.0;
    let mut entries = 0usize;
    let mut per_instance = Vec::new();
    for b in x.blocks() {
        let (mut sum, mut count) = (0.0, 0usize);
        for n in b.range() {
            for d in 0..truth.dim() {
                if !include(n, d) {
                    continue;
                }
                let (Some(p), Some(t)) = (pred.get(n, d), truth.get(n, d)) else {
                    return Err(LvaeError::Shape(format!("entry ({n}, {d}) is scored but missing")));
                };
                sum += (p - t) * (p - t);
                count += 1;
            }
        }
        if count > 0 {
            total += sum;
            entries += count;
            per_instance.push(sum / count as f64);
        }
    }
    if entries == 0 {
        return Err(LvaeError::InvalidParameter("no entries to score".into()));
    }
    let k = per_instance.len() as f64;
    let mean = per_instance.iter().sum::<f64>() / k;
    let se = if per_instance.len() > 1 {
        let var = per_instance.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Ok(MseReport {
        mse: total / entries as f64,
        instance_mean: mean,
        instance_se: se,
        entries,
        instances: per_instance.len(),
    })
}

/// Imputation error: entries missing from `input` only.
pub fn imputation_mse(
    pred: &ObservationSet,
    truth: &ObservationSet,
    input: &ObservationSet,
    x: &CovariateMatrix,
) -> Result<MseReport> {
    if input.len() != truth.len() || input.dim() != truth.dim() {
        return Err(LvaeError::Shape("input mask does not match the truth".into()));
    }
    mse_where(pred, truth, x, |n, d| !input.observed(n, d))
}

/// Prediction error: every entry of the given (held-out) rows.
pub fn prediction_mse(pred: &ObservationSet, truth: &ObservationSet, x: &CovariateMatrix) -> Result<MseReport> {
    mse_where(pred, truth, x, |_, _| true)
}
