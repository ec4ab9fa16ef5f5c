//! Reference predictors the model is compared against.

use nalgebra::DMatrix;

use crate::covariates::CovariateMatrix;
use crate::error::{LvaeError, Result};
use crate::nnet::{Decoder, ObservationSet};
use crate::predictive::{predict_observation, LatentPredictive};

/// Mean of the observed entries of each column (0 for an empty column).
pub fn column_means(y: &ObservationSet) -> Vec<f64> {
    (0..y.dim())
        .map(|d| {
            let v: Vec<f64> = (0..y.len()).filter_map(|n| y.get(n, d)).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect()
}

/// Fully observed copy of a `D×N` prediction matrix.
pub fn from_columns(mean: &DMatrix<f64>) -> Result<ObservationSet> {
    let (d, n) = mean.shape();
    // column-major D×N is row-major N×D
    ObservationSet::new(n, d, mean.as_slice().to_vec(), vec![true; n * d])
}

/// Missing entries replaced by their column's observed mean.
pub fn mean_impute(y: &ObservationSet) -> Result<ObservationSet> {
    let means = column_means(y);
    let d = y.dim();
    let values = (0..y.len() * d)
        .map(|k| y.get(k / d, k % d).unwrap_or(means[k % d]))
        .collect();
    ObservationSet::new(y.len(), d, values, vec![true; y.len() * d])
}

/// Last observation carried forward: each query row takes, per column, the
/// value at the latest training row of the same instance at or before its
/// time. Falls back to the instance's earliest observation, then to the
/// training column mean.
pub fn locf_forecast(
    train_y: &ObservationSet,
    train_x: &CovariateMatrix,
    query: &CovariateMatrix,
    time_column: usize,
) -> Result<ObservationSet> {
    if train_y.len() != train_x.len() {
        return Err(LvaeError::Shape("training observations and covariates differ in length".into()));
    }
    let means = column_means(train_y);
    let d = train_y.dim();
    let mut values = Vec::with_capacity(query.len() * d);
    for q in 0..query.len() {
        let t = query.row(q)[time_column];
        let mut rows: Vec<(f64, usize)> = match train_x.block_of_id(query.id_of_row(q)) {
            Some(b) => b
                .range()
                .filter_map(|i| train_x.row(i)[time_column].map(|ti| (ti, i)))
                .collect(),
            None => Vec::new(),
        };
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (j, &mean) in means.iter().enumerate().take(d) {
            let observed = rows.iter().filter(|(_, i)| train_y.observed(*i, j));
            let before = observed.clone().rfind(|(ti, _)| t.is_none_or(|t| *ti <= t));
            let v = before
                .or_else(|| observed.clone().next())
                .map_or(mean, |(_, i)| train_y.value(*i, j));
            values.push(v);
        }
    }
    ObservationSet::new(query.len(), d, values, vec![true; query.len() * d])
}

/// Forecast of a model with a standard-normal latent prior: the prior
/// pushed through the decoder, the same at every query row.
pub fn prior_forecast(decoder: &Decoder, latent_dim: usize, rows: usize, mc_samples: usize, seed: u64) -> Result<ObservationSet> {
    let latent = LatentPredictive {
        mean: DMatrix::zeros(latent_dim, rows),
        var: DMatrix::from_element(latent_dim, rows, 1.0),
    };
    from_columns(&predict_observation(decoder, &latent, mc_samples, seed)?.mean)
}
