//! End-to-end synthetic benchmark: generate data, pretrain and train a
//! model, then score imputation, future prediction and outcome
//! classification against the baselines.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{from_columns, locf_forecast, mean_impute, prior_forecast};
use crate::classifier::{
    auroc, auroc_permutation_p, event_times, fit_bins, Classifier, ClassifierConfig, OutcomeColumns, DEFAULT_BINS,
};
use crate::covariates::{CovariateMatrix, CovariateSchema};
use crate::datagen::{generate, GenConfig, Split};
use crate::error::{LvaeError, Result};
use crate::kernels::{parse_prior_spec, AdditivePrior};
use crate::metrics::{imputation_mse, prediction_mse, MseReport};
use crate::nnet::{Activation, Architecture, ObservationSet};
use crate::predictive::{PredictivePath, DEFAULT_MC_SAMPLES};
use crate::trainer::{impute, pretrain, train, EpochRecord, Model, ModelState, TrainConfig, TrainData};

/// Prior terms matching the structure of the generated data.
pub const DEFAULT_PRIOR: &str =
    "ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age) + bi_x_se(diseasePresence,diseaseAge)";

/// A fresh model whose kernel lengthscales start at half the range of their
/// covariate in `x`.
pub fn build_model(
    schema: &CovariateSchema,
    prior_terms: &str,
    arch: Architecture,
    x: &CovariateMatrix,
    seed: u64,
) -> Result<Model> {
    let specs = parse_prior_spec(prior_terms, schema)?;
    let prior = if specs.is_empty() {
        AdditivePrior::noise_only(arch.latent_dim)
    } else {
        AdditivePrior::new(specs, arch.latent_dim, schema, Some(x))?
    };
    Model::new(arch, schema.clone(), prior, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub data: GenConfig,
    pub prior_terms: String,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub mc_samples: usize,
    pub bins: usize,
    pub permutations: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            data: GenConfig::default(),
            prior_terms: DEFAULT_PRIOR.into(),
            latent_dim: 4,
            encoder_hidden: vec![32, 16],
            decoder_hidden: vec![16, 32],
            train: TrainConfig::default(),
            mc_samples: DEFAULT_MC_SAMPLES,
            bins: DEFAULT_BINS,
            permutations: 1000,
        }
    }
}

impl BenchmarkConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.data.data_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationScores {
    pub lvae: MseReport,
    pub column_mean: MseReport,
    pub pretrained_vae: MseReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastScores {
    pub lvae: MseReport,
    pub pretrained_vae: MseReport,
    pub locf: MseReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub auroc: f64,
    pub p_value: f64,
    pub subjects: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub imputation: ImputationScores,
    pub forecast: ForecastScores,
    pub classification: Option<ClassificationScores>,
    pub seconds: f64,
}

/// Rows of `split` whose id does (`known = true`) or does not appear in `train`.
pub fn rows_by_membership(
    split: &Split,
    train: &CovariateMatrix,
    known: bool,
) -> Result<(ObservationSet, ObservationSet, CovariateMatrix)> {
    let ids: BTreeSet<i64> = train.blocks().iter().map(|b| b.id).collect();
    let blocks: Vec<usize> = (0..split.x.n_instances())
        .filter(|&p| ids.contains(&split.x.blocks()[p].id) == known)
        .collect();
    let (x, rows) = split.x.select_instances(&blocks)?;
    Ok((split.y.select(&rows), split.truth.select(&rows), x))
}

/// Trains on the train split with validation-based snapshots and returns
/// the final state.
pub fn fit(config: &BenchmarkConfig, train_data: &TrainData, val: &TrainData, log: &mut dyn FnMut(&EpochRecord)) -> Result<ModelState> {
    let model = build_model(
        train_data.x.schema(),
        &config.prior_terms,
        config.architecture(),
        &train_data.x,
        config.train.seed,
    )?;
    let mut state = ModelState::new(model);
    pretrain(&mut state, train_data, &config.train, log)?;
    train(&mut state, train_data, Some(val), &config.train, log)?;
    Ok(state)
}

pub fn run_benchmark(config: &BenchmarkConfig, log: &mut dyn FnMut(&EpochRecord)) -> Result<BenchmarkReport> {
    let started = Instant::now();
    let data = generate(&config.data)?;
    let train_data = TrainData::new(data.train.y.clone(), data.train.x.clone())?;
    let val = TrainData::new(data.val.y.clone(), data.val.x.clone())?;
    let state = fit(config, &train_data, &val, log)?;
    let model = state.best_model();
    let pretrained = state
        .pretrained
        .as_ref()
        .ok_or_else(|| LvaeError::Config("no pretrained model to compare with".into()))?;
    let seed = config.train.seed;

    let truth = &data.train.truth;
    let input = &data.train.y;
    let x = &data.train.x;
    let imputation = ImputationScores {
        lvae: imputation_mse(&impute(model, input)?, truth, input, x)?,
        column_mean: imputation_mse(&mean_impute(input)?, truth, input, x)?,
        pretrained_vae: imputation_mse(&impute(pretrained, input)?, truth, input, x)?,
    };

    let (_, future_truth, future_x) = rows_by_membership(&data.test, x, true)?;
    let age = x.schema().index_of("age").ok_or_else(|| LvaeError::Schema("no `age` column".into()))?;
    let lvae_forecast = model.forecast(&train_data, future_x.view(), PredictivePath::default(), config.mc_samples, seed)?;
    let forecast = ForecastScores {
        lvae: prediction_mse(&from_columns(&lvae_forecast.mean)?, &future_truth, &future_x)?,
        pretrained_vae: prediction_mse(
            &prior_forecast(&pretrained.decoder, pretrained.latent_dim(), future_x.len(), config.mc_samples, seed)?,
            &future_truth,
            &future_x,
        )?,
        locf: prediction_mse(&locf_forecast(input, x, &future_x, age)?, &future_truth, &future_x)?,
    };

    let (fresh_y, _, fresh_x) = rows_by_membership(&data.test, x, false)?;
    let classification = if fresh_x.is_empty() {
        None
    } else {
        Some(classify(config, model, &train_data, &fresh_y, &fresh_x)?)
    };

    Ok(BenchmarkReport {
        imputation,
        forecast,
        classification,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Scores the instances of `(y, x)` and compares against their recorded outcome.
pub fn classify(
    config: &BenchmarkConfig,
    model: &Model,
    train_data: &TrainData,
    y: &ObservationSet,
    x: &CovariateMatrix,
) -> Result<ClassificationScores> {
    let cols = OutcomeColumns::longitudinal(x.schema())?;
    let bins = fit_bins(&event_times(&train_data.x, &cols), config.bins)?;
    let cfg = ClassifierConfig {
        seed: config.train.seed,
        dense_cap: config.train.dense_cap,
        ..ClassifierConfig::default()
    };
    let classifier = Classifier::new(model, train_data, cols, bins, cfg)?;
    let scores = classifier.score_split(y, x)?;
    let labelled: Vec<(f64, bool)> = scores.iter().filter_map(|s| s.label.map(|l| (s.probability, l))).collect();
    let (p, l): (Vec<f64>, Vec<bool>) = labelled.into_iter().unzip();
    Ok(ClassificationScores {
        auroc: auroc(&p, &l)?,
        p_value: auroc_permutation_p(&p, &l, config.permutations, config.train.seed)?,
        subjects: l.len(),
        positives: l.iter().filter(|v| **v).count(),
    })
}
