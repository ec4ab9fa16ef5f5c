//! Generative Bayes classifier for a binary outcome covariate.
//!
//! Each subject is scored by the ELBO of its observations under two
//! hypotheses about its covariates: outcome 0 (event time missing), and
//! outcome 1 averaged over binned event times seen in training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::CovariateMatrix;
use crate::error::{LvaeError, Result};
use crate::kl::{kl_exact, kl_exact_dim, VariationalMoments};
use crate::nnet::{recon_loglik, sample_latent, ObservationSet};
use crate::predictive::ConditionedDim;
use crate::trainer::{draw_noise, Model, TrainData};
use crate::CovariateSchema;

/// Default number of event-time bins.
pub const DEFAULT_BINS: usize = 6;

/// Log-spaced histogram of training event times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTimeBins {
    /// `B + 1` edges, first and last at the smallest and largest time.
    pub edges: Vec<f64>,
    /// Mean event time of each non-empty bin.
    pub times: Vec<f64>,
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl EventTimeBins {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Bins the positive entries of `times` into `b` log-spaced bins; empty
/// bins are dropped.
pub fn fit_bins(times: &[f64], b: usize) -> Result<EventTimeBins> {
    if b == 0 {
        return Err(LvaeError::Config("at least one event-time bin is needed".into()));
    }
    let t: Vec<f64> = times.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    if t.is_empty() {
        return Err(LvaeError::InvalidParameter("no positive event times to bin".into()));
    }
    let min = t.iter().copied().fold(f64::INFINITY, f64::min);
    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min.ln(), max.ln());
    let edges: Vec<f64> = (0..=b)
        .map(|k| match k {
            0 => min,
            k if k == b => max,
            k => (lo + (hi - lo) * k as f64 / b as f64).exp(),
        })
        .collect();
    let mut counts = vec![0usize; b];
    let mut sums = vec![0.0; b];
    for &v in &t {
        let k = if hi > lo {
            (((v.ln() - lo) / (hi - lo) * b as f64).floor() as usize).min(b - 1)
        } else {
            0
        };
        counts[k] += 1;
        sums[k] += v;
    }
    let total = t.len() as f64;
    let keep: Vec<usize> = (0..b).filter(|&k| counts[k] > 0).collect();
    Ok(EventTimeBins {
        edges,
        times: keep.iter().map(|&k| sums[k] / counts[k] as f64).collect(),
        counts: keep.iter().map(|&k| counts[k]).collect(),
        weights: keep.iter().map(|&k| counts[k] as f64 / total).collect(),
    })
}

/// How the event time enters the event covariate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventEncoding {
    /// The covariate holds the event time itself.
    Constant,
    /// The covariate holds `x[column] − t`, e.g. time since onset.
    OffsetFrom(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeColumns {
    pub outcome: usize,
    pub event: usize,
    pub encoding: EventEncoding,
}

impl OutcomeColumns {
    /// `diseasePresence`, with `diseaseAge = age − onset`.
    pub fn longitudinal(schema: &CovariateSchema) -> Result<Self> {
        let find = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| LvaeError::Schema(format!("no `{name}` column")))
        };
        Ok(OutcomeColumns {
            outcome: find("diseasePresence")?,
            event: find("diseaseAge")?,
            encoding: EventEncoding::OffsetFrom(find("age")?),
        })
    }

    fn event_time(&self, row: &[Option<f64>]) -> Option<f64> {
        let v = row[self.event]?;
        match self.encoding {
            EventEncoding::Constant => Some(v),
            EventEncoding::OffsetFrom(c) => Some(row[c]? - v),
        }
    }

    fn event_value(&self, row: &[Option<f64>], t: f64) -> Option<f64> {
        match self.encoding {
            EventEncoding::Constant => Some(t),
            EventEncoding::OffsetFrom(c) => row[c].map(|v| v - t),
        }
    }
}

/// One event time per instance with outcome 1: the first row where it can
/// be recovered.
pub fn event_times(x: &CovariateMatrix, cols: &OutcomeColumns) -> Vec<f64> {
    x.blocks()
        .iter()
        .filter_map(|b| {
            b.range()
                .find(|&i| x.row(i)[cols.outcome] == Some(1.0) && cols.event_time(x.row(i)).is_some())
                .and_then(|i| cols.event_time(x.row(i)))
        })
        .collect()
}

/// The outcome label of each instance (`None` when unrecorded).
pub fn instance_labels(x: &CovariateMatrix, cols: &OutcomeColumns) -> Vec<Option<bool>> {
    x.blocks()
        .iter()
        .map(|b| b.range().find_map(|i| x.row(i)[cols.outcome]).map(|v| v == 1.0))
        .collect()
}

/// Copy of `x` with the outcome set and the event covariate filled from
/// event time `t` (or missing when `t` is `None`).
pub fn with_hypothesis(x: &CovariateMatrix, cols: &OutcomeColumns, outcome: bool, t: Option<f64>) -> Result<CovariateMatrix> {
    let value = f64::from(u8::from(outcome));
    let set = x.with_column(cols.outcome, |_| Some(value))?;
    set.with_column(cols.event, |i| t.and_then(|t| cols.event_value(set.row(i), t)))
}

/// Latent prior a subject is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HypothesisPrior {
    /// GP predictive given the encoded training data: shared effects learned
    /// from training instances inform the prior of the new subject.
    #[default]
    Conditioned,
    /// The additive prior at the subject's rows alone.
    Marginal,
}

impl HypothesisPrior {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conditioned" => Ok(HypothesisPrior::Conditioned),
            "marginal" => Ok(HypothesisPrior::Marginal),
            _ => Err(LvaeError::Config(format!("unknown hypothesis prior `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HypothesisPrior::Conditioned => "conditioned",
            HypothesisPrior::Marginal => "marginal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub prior: HypothesisPrior,
    /// Reparameterization draws for the reconstruction term.
    pub mc_samples: usize,
    pub seed: u64,
    pub dense_cap: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            prior: HypothesisPrior::Conditioned,
            mc_samples: 4,
            seed: 0,
            dense_cap: crate::kernels::DEFAULT_DENSE_CAP,
        }
    }
}

pub struct Classifier<'a> {
    model: &'a Model,
    cols: OutcomeColumns,
    bins: EventTimeBins,
    config: ClassifierConfig,
    conditioned: Vec<ConditionedDim<'a>>,
}

impl<'a> Classifier<'a> {
    /// Freezes `model`; the conditioned prior also factors the training
    /// covariance of every latent dimension here.
    pub fn new(
        model: &'a Model,
        train: &'a TrainData,
        cols: OutcomeColumns,
        bins: EventTimeBins,
        config: ClassifierConfig,
    ) -> Result<Self> {
        if !model.prior.specs().iter().any(|s| s.columns().any(|c| c == cols.outcome)) {
            return Err(LvaeError::Config(format!(
                "the prior has no term reading `{}`",
                model.schema.name(cols.outcome)
            )));
        }
        if config.mc_samples == 0 {
            return Err(LvaeError::Config("mc_samples must be at least 1".into()));
        }
        let conditioned = match config.prior {
            HypothesisPrior::Marginal => Vec::new(),
            HypothesisPrior::Conditioned => {
                let moments = model.encode(&train.y)?;
                (0..model.latent_dim())
                    .map(|l| {
                        let (mu, w) = moments.dim(l);
                        ConditionedDim::new(model.prior.dim(l), &train.x, &mu, &w, config.dense_cap)
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Classifier {
            model,
            cols,
            bins,
            config,
            conditioned,
        })
    }

    pub fn bins(&self) -> &EventTimeBins {
        &self.bins
    }

    fn recon(&self, y: &ObservationSet, q: &VariationalMoments) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut total = 0.0;
        for _ in 0..self.config.mc_samples {
            let noise = draw_noise(&mut rng, q.latent_dim(), q.len());
            let z = sample_latent(&q.mean, &q.var, &noise);
            let out = self.model.decoder.decode(&z)?;
            total += recon_loglik(y, out.output(), &self.model.decoder.log_obs_var)?.loglik;
        }
        Ok(total / self.config.mc_samples as f64)
    }

    fn kl(&self, x: &CovariateMatrix, q: &VariationalMoments) -> Result<f64> {
        let mut total = 0.0;
        for l in 0..self.model.latent_dim() {
            let (mu, w) = q.dim(l);
            total += match self.config.prior {
                HypothesisPrior::Marginal => kl_exact_dim(&mu, &w, &self.model.prior, l, x)?,
                HypothesisPrior::Conditioned => {
                    let (m, sigma) = self.conditioned[l].joint(x.view())?;
                    kl_exact(&(mu - m), &w, &sigma)?
                }
            };
        }
        Ok(total)
    }

    /// ELBO of `y` under fully specified covariates `x`.
    pub fn conditioned_elbo(&self, y: &ObservationSet, x: &CovariateMatrix) -> Result<f64> {
        if y.len() != x.len() {
            return Err(LvaeError::Shape(format!("{} observation rows, {} covariate rows", y.len(), x.len())));
        }
        let q = self.model.encode(y)?;
        Ok(self.recon(y, &q)? - self.kl(x, &q)?)
    }

    /// Outcome 0: event time missing. Outcome 1: `Σᵢ wᵢ · ELBO(tᵢ)`.
    pub fn hypothesis_elbo(&self, y: &ObservationSet, x: &CovariateMatrix, outcome: bool) -> Result<f64> {
        if !outcome {
            return self.conditioned_elbo(y, &with_hypothesis(x, &self.cols, false, None)?);
        }
        let mut total = 0.0;
        for (&t, &w) in self.bins.times.iter().zip(&self.bins.weights) {
            total += w * self.conditioned_elbo(y, &with_hypothesis(x, &self.cols, true, Some(t))?)?;
        }
        Ok(total)
    }

    /// `(L₀, L₁, P₁)` for one subject.
    pub fn score(&self, y: &ObservationSet, x: &CovariateMatrix) -> Result<(f64, f64, f64)> {
        let l0 = self.hypothesis_elbo(y, x, false)?;
        let l1 = self.hypothesis_elbo(y, x, true)?;
        Ok((l0, l1, outcome_probability(l0, l1)?))
    }

    pub fn predict_outcome_prob(&self, y: &ObservationSet, x: &CovariateMatrix) -> Result<f64> {
        Ok(self.score(y, x)?.2)
    }

    /// Scores every instance of a split independently.
    pub fn score_split(&self, y: &ObservationSet, x: &CovariateMatrix) -> Result<Vec<SubjectScore>> {
        if y.len() != x.len() {
            return Err(LvaeError::Shape(format!("{} observation rows, {} covariate rows", y.len(), x.len())));
        }
        let labels = instance_labels(x, &self.cols);
        (0..x.n_instances())
            .into_par_iter()
            .map(|p| {
                let (xs, rows) = x.select_instances(&[p])?;
                let ys = y.select(&rows);
                let (l0, l1, probability) = self.score(&ys, &xs)?;
                Ok(SubjectScore {
                    id: x.blocks()[p].id,
                    l0,
                    l1,
                    probability,
                    label: labels[p],
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub id: i64,
    pub l0: f64,
    pub l1: f64,
    pub probability: f64,
    pub label: Option<bool>,
}

/// `exp(L₁) / (exp(L₀) + exp(L₁))` with the larger ELBO subtracted first.
pub fn outcome_probability(l0: f64, l1: f64) -> Result<f64> {
    if l0.is_nan() || l1.is_nan() {
        return Err(LvaeError::NonFinite("hypothesis ELBO".into()));
    }
    if l0 == f64::NEG_INFINITY && l1 == f64::NEG_INFINITY {
        return Err(LvaeError::NonFinite("both hypothesis ELBOs are −∞".into()));
    }
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    Ok(e1 / (e0 + e1))
}

/// Rank-based area under the ROC curve; tied scores count ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(LvaeError::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(LvaeError::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(LvaeError::InvalidParameter("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mean_rank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-sided permutation p-value of the observed AUROC against shuffled
/// labels: `(1 + #{AUROC_perm ≥ AUROC_obs}) / (1 + permutations)`.
pub fn auroc_permutation_p(scores: &[f64], labels: &[bool], permutations: usize, seed: u64) -> Result<f64> {
    let observed = auroc(scores, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if auroc(scores, &shuffled)? >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + permutations) as f64)
}
