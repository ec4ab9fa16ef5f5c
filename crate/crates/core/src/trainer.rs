//! Optimization of the full model: VAE pretraining under a standard-normal
//! prior, then training with the additive GP prior through one of the KL
//! computations, Adam on the amortized and kernel parameters and natural
//! gradients on the inducing posteriors.

use std::ops::Range;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateKind, CovariateMatrix, CovariateSchema, InstanceBatch, Points, Rows};
use crate::error::{LvaeError, Result};
use crate::kernels::{AdditivePrior, DEFAULT_DENSE_CAP};
use crate::kl::{
    bound_d2_with_grad, d4_natural_gradient_step, d4_with_grad, kl_exact_with_grad, optimal_posterior, DimGrad,
    InducingPosterior, InducingState, VariationalMoments,
};
use crate::nnet::{
    recon_loglik, sample_latent, sample_latent_var_adjoint, standard_normal_kl, Architecture, Decoder, Encoder,
    ObservationSet,
};
use crate::predictive::{predict_latent, predict_observation, ObservationPredictive, PredictivePath};

/// KL computation used by the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundChoice {
    Exact,
    D2,
    /// Uncollapsed bound estimated from batches of whole instances.
    D4,
}

impl BoundChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(BoundChoice::Exact),
            "d2" => Ok(BoundChoice::D2),
            "d4" | "d4-minibatch" => Ok(BoundChoice::D4),
            other => Err(LvaeError::Config(format!(
                "unknown bound `{other}` (expected exact, d2 or d4)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundChoice::Exact => "exact",
            BoundChoice::D2 => "d2",
            BoundChoice::D4 => "d4",
        }
    }

    fn needs_inducing(self) -> bool {
        self != BoundChoice::Exact
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub bound: BoundChoice,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Instances per mini-batch (uncollapsed bound and pretraining).
    pub batch_instances: usize,
    pub adam: AdamConfig,
    /// Multiplier on the learning rate of kernel parameters and inducing locations.
    pub gp_lr_scale: f64,
    pub natgrad_step: f64,
    /// Epochs without validation improvement before stopping; 0 runs to the cap.
    pub patience: usize,
    pub seed: u64,
    pub dense_cap: usize,
    pub inducing_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bound: BoundChoice::D4,
            epochs: 200,
            pretrain_epochs: 200,
            batch_instances: 8,
            adam: AdamConfig::default(),
            gp_lr_scale: 0.1,
            natgrad_step: 0.2,
            patience: 0,
            seed: 0,
            dense_cap: DEFAULT_DENSE_CAP,
            inducing_count: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let positive = [
            ("adam lr", a.lr),
            ("adam eps", a.eps),
            ("gp_lr_scale", self.gp_lr_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LvaeError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(LvaeError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.natgrad_step > 0.0 && self.natgrad_step <= 1.0) {
            return Err(LvaeError::Config(format!(
                "natgrad_step must lie in (0, 1], got {}",
                self.natgrad_step
            )));
        }
        if self.batch_instances == 0 {
            return Err(LvaeError::Config("batch_instances must be at least 1".into()));
        }
        if self.bound.needs_inducing() && self.inducing_count == 0 {
            return Err(LvaeError::Config("inducing_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Observations with row-aligned covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub y: ObservationSet,
    pub x: CovariateMatrix,
}

impl TrainData {
    pub fn new(y: ObservationSet, x: CovariateMatrix) -> Result<Self> {
        if y.len() != x.len() {
            return Err(LvaeError::Shape(format!(
                "{} observation rows but {} covariate rows",
                y.len(),
                x.len()
            )));
        }
        Ok(TrainData { y, x })
    }

    pub fn batch(&self, blocks: &[usize]) -> Result<(InstanceBatch, ObservationSet)> {
        let b = self.x.batch(blocks)?;
        let y = self.y.select(&b.rows);
        Ok((b, y))
    }

    pub fn full_batch(&self) -> Result<(InstanceBatch, ObservationSet)> {
        let all: Vec<usize> = (0..self.x.n_instances()).collect();
        self.batch(&all)
    }
}

/// Encoder, decoder, GP prior and inducing state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub schema: CovariateSchema,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: AdditivePrior,
    pub inducing: Option<InducingState>,
}

/// Where each parameter group sits in the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub encoder: Range<usize>,
    /// Decoder weights followed by the raw log observation variances.
    pub decoder: Range<usize>,
    pub obs_var: Range<usize>,
    pub prior: Vec<Range<usize>>,
    pub inducing: Range<usize>,
    /// `(row, column)` of each trainable inducing coordinate.
    pub inducing_coords: Vec<(usize, usize)>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.inducing.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-coordinate learning rates.
    pub fn learning_rates(&self, lr: f64, gp_scale: f64) -> Vec<f64> {
        let mut out = vec![lr; self.len()];
        let gp_start = self.prior.first().map_or(self.inducing.start, |r| r.start);
        for v in &mut out[gp_start..] {
            *v = lr * gp_scale;
        }
        out
    }
}

impl Model {
    pub fn new(arch: Architecture, schema: CovariateSchema, prior: AdditivePrior, seed: u64) -> Result<Self> {
        if prior.latent_dim() != arch.latent_dim {
            return Err(LvaeError::Config(format!(
                "prior has {} latent dimensions, architecture {}",
                prior.latent_dim(),
                arch.latent_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&arch, &mut rng);
        let decoder = Decoder::new(&arch, &mut rng);
        Ok(Model {
            arch,
            schema,
            encoder,
            decoder,
            prior,
            inducing: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Places `m` inducing rows over the training covariates (see
    /// [`init_inducing_rows`]) with prior-like posteriors.
    pub fn init_inducing(&mut self, x: &CovariateMatrix, m: usize, seed: u64) -> Result<()> {
        let s = init_inducing_rows(x, &self.prior, m, seed)?;
        self.set_inducing_rows(s)
    }

    pub fn set_inducing_rows(&mut self, s: Points) -> Result<()> {
        let posteriors = (0..self.latent_dim())
            .map(|l| {
                let dim = self.prior.dim(l);
                let mut kss = dim.a_kernel(s.view(), s.view())?;
                crate::linalg::Factor::new_in_place(&mut kss, "inducing covariance")?;
                Ok(InducingPosterior::prior_like(&kss))
            })
            .collect::<Result<Vec<_>>>()?;
        self.inducing = Some(InducingState { s, posteriors });
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let ne = self.encoder.n_params();
        let nd = self.decoder.n_params();
        let d = self.decoder.data_dim();
        let mut at = ne + nd;
        let np = self.prior.n_params_per_dim();
        let prior = (0..self.latent_dim())
            .map(|_| {
                let r = at..at + np;
                at += np;
                r
            })
            .collect();
        let inducing_coords = self.inducing_coords();
        ParamLayout {
            encoder: 0..ne,
            decoder: ne..ne + nd,
            obs_var: ne + nd - d..ne + nd,
            prior,
            inducing: at..at + inducing_coords.len(),
            inducing_coords,
        }
    }

    /// Continuous inducing coordinates read by a squared-exponential factor
    /// of the candidate part, where present.
    fn inducing_coords(&self) -> Vec<(usize, usize)> {
        let Some(state) = &self.inducing else {
            return Vec::new();
        };
        let mut cols: Vec<usize> = self
            .prior
            .specs()
            .iter()
            .zip(self.prior.instance_part())
            .filter(|(_, inst)| !**inst)
            .filter_map(|(s, _)| s.se_column())
            .filter(|&c| self.schema.kind(c) == CovariateKind::Continuous)
            .collect();
        cols.sort_unstable();
        cols.dedup();
        let mut out = Vec::new();
        for i in 0..state.s.len() {
            for &c in &cols {
                if state.s.get(i, c).is_some() {
                    out.push((i, c));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        self.encoder.write_params(&mut out);
        self.decoder.write_params(&mut out);
        for l in 0..self.latent_dim() {
            out.extend(self.prior.params(l));
        }
        if let Some(state) = &self.inducing {
            for (i, c) in self.inducing_coords() {
                out.push(state.s.get(i, c).expect("coordinate present"));
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let layout = self.layout();
        if params.len() != layout.len() {
            return Err(LvaeError::Shape(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(LvaeError::NonFinite("parameter update".into()));
        }
        self.encoder.read_params(&params[layout.encoder.clone()]);
        self.decoder.read_params(&params[layout.decoder.clone()]);
        for (l, r) in layout.prior.iter().enumerate() {
            self.prior.set_params(l, &params[r.clone()])?;
        }
        if let Some(state) = &mut self.inducing {
            for (k, &(i, c)) in layout.inducing_coords.iter().enumerate() {
                state.s.set(i, c, Some(params[layout.inducing.start + k]));
            }
        }
        Ok(())
    }

    /// Encoder moments of every row, `L×N`.
    pub fn encode(&self, y: &ObservationSet) -> Result<VariationalMoments> {
        let t = self.encoder.encode(&y.encoder_input())?;
        VariationalMoments::new(t.mean, t.var)
    }

    /// Observation-space predictive at `query`, conditioned on the encoded
    /// training data.
    pub fn forecast(
        &self,
        train: &TrainData,
        query: Rows<'_>,
        path: PredictivePath,
        mc_samples: usize,
        seed: u64,
    ) -> Result<ObservationPredictive> {
        let moments = self.encode(&train.y)?;
        let latent = predict_latent(query, &train.x, &moments, &self.prior, self.inducing.as_ref(), path)?;
        predict_observation(&self.decoder, &latent, mc_samples, seed)
    }
}

/// Prior used inside the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `N(0, I)` prior of a plain VAE.
    StandardNormal,
    Gp(BoundChoice),
}

/// Value of one objective evaluation: `loss = −recon + kl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub loss: f64,
    /// Reconstruction log-likelihood (batch-normalized for the uncollapsed bound).
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboGrad {
    /// Aligned with [`Model::params`].
    pub params: Vec<f64>,
    /// `(∂/∂m, ∂/∂H)` per latent dimension, uncollapsed bound only.
    pub natural: Vec<(DVector<f64>, DMatrix<f64>)>,
}

/// Standard-normal draws for the reparameterization of a batch.
pub fn draw_noise<R: Rng>(rng: &mut R, latent_dim: usize, rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(latent_dim, rows, |_, _| StandardNormal.sample(rng))
}

/// Negative ELBO of one batch of whole instances and its gradient with
/// respect to every Adam-owned parameter, for fixed reparameterization noise.
pub fn elbo_step(
    model: &Model,
    batch: &InstanceBatch,
    y: &ObservationSet,
    objective: Objective,
    noise: &DMatrix<f64>,
    dense_cap: usize,
) -> Result<(ElboValue, ElboGrad)> {
    let n = batch.x.len();
    let l_dim = model.latent_dim();
    if y.len() != n {
        return Err(LvaeError::Shape(format!("{} observation rows for {n} covariate rows", y.len())));
    }
    if noise.shape() != (l_dim, n) {
        return Err(LvaeError::Shape(format!("noise {:?}, expected ({l_dim}, {n})", noise.shape())));
    }
    let enc = model.encoder.encode(&y.encoder_input())?;
    let z = sample_latent(&enc.mean, &enc.var, noise);
    let dec = model.decoder.decode(&z)?;
    let rec = recon_loglik(y, dec.output(), &model.decoder.log_obs_var)?;
    let scale = match objective {
        Objective::Gp(BoundChoice::D4) => batch.scale(),
        _ => 1.0,
    };

    let layout = model.layout();
    let mut grad = vec![0.0; layout.len()];
    let mut d_mean = DMatrix::zeros(l_dim, n);
    let mut d_var = DMatrix::zeros(l_dim, n);
    let mut natural = Vec::new();
    let kl = match objective {
        Objective::StandardNormal => {
            let (kl, dm, dv) = standard_normal_kl(&enc.mean, &enc.var);
            d_mean += dm;
            d_var += dv;
            kl
        }
        Objective::Gp(bound) => {
            let state = model.inducing.as_ref();
            if bound.needs_inducing() && state.is_none() {
                return Err(LvaeError::Config(format!("the {} bound needs inducing rows", bound.name())));
            }
            let per_dim = (0..l_dim)
                .into_par_iter()
                .map(|l| {
                    let mu = enc.mean.row(l).transpose();
                    let w = enc.var.row(l).transpose();
                    let dim = model.prior.dim(l);
                    match bound {
                        BoundChoice::Exact => {
                            kl_exact_with_grad(dim, &batch.x, &mu, &w, Some(dense_cap)).map(|(v, g)| (v, g, None))
                        }
                        BoundChoice::D2 => {
                            let s = state.expect("checked").s.view();
                            bound_d2_with_grad(dim, &batch.x, s, &mu, &w).map(|(v, g)| (v, g, None))
                        }
                        BoundChoice::D4 => {
                            let st = state.expect("checked");
                            d4_with_grad(dim, &batch.x, st.s.view(), &mu, &w, &st.posteriors[l], scale, batch.total_rows)
                                .map(|(v, g)| (v, g.dim, Some((g.m, g.h))))
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut kl = 0.0;
            for (l, (v, g, nat)) in per_dim.into_iter().enumerate() {
                kl += v;
                add_dim_grad(&mut grad, &layout, l, &g, &mut d_mean, &mut d_var);
                if let Some(nat) = nat {
                    natural.push(nat);
                }
            }
            kl
        }
    };

    let recon = scale * rec.loglik;
    let loss = -recon + kl;
    if !loss.is_finite() {
        return Err(LvaeError::NonFinite(format!(
            "training loss (reconstruction {recon}, KL {kl})"
        )));
    }

    let d_out = -scale * rec.d_mean;
    let dz = model.decoder.backward(&dec, d_out, &mut grad[layout.decoder.clone()]);
    for (g, d) in grad[layout.obs_var.clone()].iter_mut().zip(rec.d_log_obs_var.iter()) {
        *g -= scale * d;
    }
    d_mean += &dz;
    d_var += sample_latent_var_adjoint(&enc.var, noise, &dz);
    model.encoder.backward(&enc, &d_mean, &d_var, &mut grad[layout.encoder.clone()]);
    Ok((ElboValue { loss, recon, kl }, ElboGrad { params: grad, natural }))
}

fn add_dim_grad(
    grad: &mut [f64],
    layout: &ParamLayout,
    l: usize,
    g: &DimGrad,
    d_mean: &mut DMatrix<f64>,
    d_var: &mut DMatrix<f64>,
) {
    d_mean.row_mut(l).copy_from(&g.mean.transpose());
    d_var.row_mut(l).copy_from(&g.var.transpose());
    for (dst, v) in grad[layout.prior[l].clone()].iter_mut().zip(&g.params) {
        *dst += v;
    }
    if g.inducing.nrows() > 0 {
        for (k, &(i, c)) in layout.inducing_coords.iter().enumerate() {
            grad[layout.inducing.start + k] += g.inducing[(i, c)];
        }
    }
}

/// Objective value without gradients.
pub fn evaluate_elbo(
    model: &Model,
    data: &TrainData,
    objective: Objective,
    noise: &DMatrix<f64>,
    dense_cap: usize,
) -> Result<ElboValue> {
    let (batch, y) = data.full_batch()?;
    elbo_step(model, &batch, &y, objective, noise, dense_cap).map(|(v, _)| v)
}

/// Adam with per-coordinate learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lrs: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != params.len() || lrs.len() != params.len() {
            return Err(LvaeError::Shape("Adam buffers do not match the parameters".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fresh,
    Pretrain,
    Train,
}

/// The best model seen on validation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_loss: f64,
    pub model: Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub model: Model,
    pub adam: Adam,
    pub phase: Phase,
    /// Completed epochs in the current phase.
    pub epoch: usize,
    pub best: Option<Snapshot>,
    /// Checkpoint of the model at the end of pretraining, kept as a baseline.
    pub pretrained: Option<Model>,
}

impl ModelState {
    pub fn new(model: Model) -> Self {
        let n = model.layout().len();
        ModelState {
            model,
            adam: Adam::new(n),
            phase: Phase::Fresh,
            epoch: 0,
            best: None,
            pretrained: None,
        }
    }

    /// The best validation snapshot, or the current model when none exists.
    pub fn best_model(&self) -> &Model {
        self.best.as_ref().map_or(&self.model, |s| &s.model)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

fn shuffled_batches(rng: &mut ChaCha8Rng, n_instances: usize, size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_instances).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Epoch-local generator, so a resumed run draws the same batches and noise.
fn phase_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Fresh => 0,
        Phase::Pretrain => 1,
        Phase::Train => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(tag);
    rng
}

/// Fixed noise for validation so that epochs are compared on equal terms.
fn validation_noise(seed: u64, latent_dim: usize, rows: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    draw_noise(&mut rng, latent_dim, rows)
}

/// Trains encoder and decoder under the standard-normal prior for
/// `config.pretrain_epochs` epochs; GP parameters are not touched.
pub fn pretrain(
    state: &mut ModelState,
    data: &TrainData,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    config.validate()?;
    if state.phase == Phase::Train {
        return Err(LvaeError::Config("the model is already past pretraining".into()));
    }
    if state.phase == Phase::Fresh {
        state.phase = Phase::Pretrain;
        state.epoch = 0;
        state.adam = Adam::new(state.model.layout().len());
    }
    let layout = state.model.layout();
    let lrs = layout.learning_rates(config.adam.lr, config.gp_lr_scale);
    while state.epoch < config.pretrain_epochs {
        let started = Instant::now();
        let mut rng = phase_rng(config.seed, Phase::Pretrain, state.epoch);
        let batches = shuffled_batches(&mut rng, data.x.n_instances(), config.batch_instances);
        let mut sum = ElboValue { loss: 0.0, recon: 0.0, kl: 0.0 };
        for blocks in &batches {
            let (batch, y) = data.batch(blocks)?;
            let noise = draw_noise(&mut rng, state.model.latent_dim(), batch.x.len());
            let (v, g) = elbo_step(&state.model, &batch, &y, Objective::StandardNormal, &noise, config.dense_cap)?;
            let mut grad = g.params;
            // only the networks move during pretraining
            for x in &mut grad[layout.decoder.end..] {
                *x = 0.0;
            }
            let mut params = state.model.params();
            state.adam.step(&mut params, &grad, &lrs, &config.adam)?;
            state.model.set_params(&params)?;
            sum.loss += v.loss;
            sum.recon += v.recon;
            sum.kl += v.kl;
        }
        state.epoch += 1;
        log(&EpochRecord {
            phase: Phase::Pretrain,
            epoch: state.epoch,
            train_loss: sum.loss,
            recon: sum.recon,
            kl: sum.kl,
            val_loss: None,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    state.pretrained = Some(state.model.clone());
    Ok(())
}

/// Trains with the GP prior for `config.epochs` epochs.
///
/// Each epoch visits shuffled batches of whole instances (a single full
/// batch for the exact and collapsed bounds). Every batch takes one Adam
/// step on the network, kernel and inducing-location parameters; with the
/// uncollapsed bound it is followed by one natural-gradient step on each
/// inducing posterior. The validation objective is recorded after every
/// epoch and the best model is kept as a snapshot. On error the state keeps
/// the last good parameters and the snapshot.
pub fn train(
    state: &mut ModelState,
    train_data: &TrainData,
    val_data: Option<&TrainData>,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    config.validate()?;
    let bound = config.bound;
    if state.phase != Phase::Train {
        if state.phase == Phase::Fresh {
            warn!("training a model that was not pretrained");
        }
        state.phase = Phase::Train;
        state.epoch = 0;
        if bound.needs_inducing() && state.model.inducing.is_none() {
            state
                .model
                .init_inducing(&train_data.x, config.inducing_count, config.seed)?;
        }
        if bound == BoundChoice::D4 {
            refresh_posteriors(&mut state.model, train_data)?;
        }
        state.adam = Adam::new(state.model.layout().len());
    }
    let layout = state.model.layout();
    if state.adam.m.len() != layout.len() {
        return Err(LvaeError::Checkpoint("optimizer buffers do not match the parameters".into()));
    }
    let lrs = layout.learning_rates(config.adam.lr, config.gp_lr_scale);
    let val_objective = Objective::Gp(if bound == BoundChoice::D4 { BoundChoice::D2 } else { bound });
    let val_noise = val_data.map(|v| validation_noise(config.seed, state.model.latent_dim(), v.x.len()));
    let batch_size = match bound {
        BoundChoice::D4 => config.batch_instances,
        _ => train_data.x.n_instances(),
    };
    let mut since_best = 0;
    while state.epoch < config.epochs {
        let started = Instant::now();
        let mut rng = phase_rng(config.seed, Phase::Train, state.epoch);
        let batches = shuffled_batches(&mut rng, train_data.x.n_instances(), batch_size);
        let mut sum = ElboValue { loss: 0.0, recon: 0.0, kl: 0.0 };
        for blocks in &batches {
            let (batch, y) = train_data.batch(blocks)?;
            let noise = draw_noise(&mut rng, state.model.latent_dim(), batch.x.len());
            let (v, g) = elbo_step(&state.model, &batch, &y, Objective::Gp(bound), &noise, config.dense_cap)?;
            let mut params = state.model.params();
            state.adam.step(&mut params, &g.params, &lrs, &config.adam)?;
            let mut next = state.model.clone();
            next.set_params(&params)?;
            if let Some(inducing) = &mut next.inducing {
                for (post, (dm, dh)) in inducing.posteriors.iter_mut().zip(&g.natural) {
                    *post = d4_natural_gradient_step(post, dm, dh, config.natgrad_step)?;
                }
            }
            state.model = next;
            let k = batches.len() as f64;
            sum.loss += v.loss / k;
            sum.recon += v.recon / k;
            sum.kl += v.kl / k;
        }
        state.epoch += 1;
        let val_loss = match (val_data, &val_noise) {
            (Some(v), Some(noise)) => {
                let value = evaluate_elbo(&state.model, v, val_objective, noise, config.dense_cap)?.loss;
                if !value.is_finite() {
                    return Err(LvaeError::NonFinite(format!("validation loss at epoch {}", state.epoch)));
                }
                Some(value)
            }
            _ => None,
        };
        let record = EpochRecord {
            phase: Phase::Train,
            epoch: state.epoch,
            train_loss: sum.loss,
            recon: sum.recon,
            kl: sum.kl,
            val_loss,
            wall_time: started.elapsed().as_secs_f64(),
        };
        debug!("epoch {} loss {:.4} val {:?}", record.epoch, record.train_loss, record.val_loss);
        log(&record);
        if let Some(vl) = val_loss {
            if state.best.as_ref().is_none_or(|b| vl < b.val_loss) {
                state.best = Some(Snapshot {
                    epoch: state.epoch,
                    val_loss: vl,
                    model: state.model.clone(),
                });
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience > 0 && since_best >= config.patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Sets every inducing posterior to its optimum for the current encoder
/// moments of the full training data.
pub fn refresh_posteriors(model: &mut Model, data: &TrainData) -> Result<()> {
    let moments = model.encode(&data.y)?;
    let Some(state) = &model.inducing else {
        return Err(LvaeError::Config("no inducing rows to refresh".into()));
    };
    let posteriors = (0..model.latent_dim())
        .into_par_iter()
        .map(|l| {
            let (mu, _) = moments.dim(l);
            optimal_posterior(model.prior.dim(l), &data.x, state.s.view(), &mu)
        })
        .collect::<Result<Vec<_>>>()?;
    model.inducing.as_mut().expect("checked").posteriors = posteriors;
    Ok(())
}

/// Fills the missing entries of `y` with the decoded encoder means;
/// observed entries pass through unchanged.
pub fn impute(model: &Model, y: &ObservationSet) -> Result<ObservationSet> {
    let t = model.encoder.encode(&y.encoder_input())?;
    let dec = model.decoder.decode(&t.mean)?;
    let out = dec.output();
    let mut values = y.values().to_vec();
    let d = y.dim();
    for n in 0..y.len() {
        for j in 0..d {
            if !y.observed(n, j) {
                values[n * d + j] = out[(j, n)];
            }
        }
    }
    ObservationSet::new(y.len(), d, values, vec![true; y.len() * d])
}

/// Chooses `m` inducing rows for the candidate part of the prior.
///
/// Rows are grouped by the discrete covariates read by candidate terms and
/// by which continuous ones are present; the budget is shared out in
/// proportion to group size and each group is summarized by k-means on its
/// continuous coordinates. Columns no candidate term reads (including the
/// id) are left empty.
pub fn init_inducing_rows(x: &CovariateMatrix, prior: &AdditivePrior, m: usize, seed: u64) -> Result<Points> {
    if m == 0 {
        return Err(LvaeError::Config("need at least one inducing row".into()));
    }
    let schema = x.schema();
    let mut read: Vec<usize> = prior
        .specs()
        .iter()
        .zip(prior.instance_part())
        .filter(|(_, inst)| !**inst)
        .flat_map(|(s, _)| s.columns().collect::<Vec<_>>())
        .collect();
    read.sort_unstable();
    read.dedup();
    let discrete: Vec<usize> = read
        .iter()
        .copied()
        .filter(|&c| schema.kind(c) != CovariateKind::Continuous)
        .collect();
    let continuous: Vec<usize> = read
        .iter()
        .copied()
        .filter(|&c| schema.kind(c) == CovariateKind::Continuous)
        .collect();

    // group key: discrete codes (as integers) and the continuous presence pattern
    type Key = (Vec<Option<i64>>, Vec<bool>);
    let mut groups: std::collections::BTreeMap<Key, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..x.len() {
        let row = x.row(i);
        let key = (
            discrete.iter().map(|&c| row[c].map(|v| v as i64)).collect(),
            continuous.iter().map(|&c| row[c].is_some()).collect(),
        );
        groups.entry(key).or_default().push(i);
    }
    let groups: Vec<(Key, Vec<usize>)> = groups.into_iter().collect();
    let distinct: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|((_, present), rows)| {
            let cols: Vec<usize> = continuous
                .iter()
                .zip(present)
                .filter(|(_, p)| **p)
                .map(|(c, _)| *c)
                .collect();
            let mut pts: Vec<Vec<f64>> = rows
                .iter()
                .map(|&i| cols.iter().map(|&c| x.row(i)[c].expect("present")).collect())
                .collect();
            pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            pts.dedup();
            pts
        })
        .collect();
    let alloc = allocate(
        &groups.iter().map(|(_, r)| r.len()).collect::<Vec<_>>(),
        &distinct.iter().map(Vec::len).collect::<Vec<_>>(),
        m,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut s = Points::empty(schema.len());
    for (((disc, present), _), (pts, &k)) in groups.iter().zip(distinct.iter().zip(&alloc)) {
        if k == 0 {
            continue;
        }
        let centers = kmeans(pts, k, &mut rng);
        for c in centers {
            let mut row = vec![None; schema.len()];
            for (&col, v) in discrete.iter().zip(disc) {
                row[col] = v.map(|v| v as f64);
            }
            let mut it = c.into_iter();
            for (&col, p) in continuous.iter().zip(present) {
                if *p {
                    row[col] = it.next();
                }
            }
            s.push_row(&row);
        }
    }
    Ok(s)
}

/// Largest-remainder allocation of `m` slots in proportion to `sizes`,
/// at most `caps[i]` to group `i` and, budget permitting, at least one each.
fn allocate(sizes: &[usize], caps: &[usize], m: usize) -> Vec<usize> {
    let g = sizes.len();
    let mut out = vec![0; g];
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i]));
    let mut left = m;
    for &i in &order {
        if left == 0 {
            break;
        }
        if caps[i] > 0 {
            out[i] = 1;
            left -= 1;
        }
    }
    while left > 0 {
        let total: usize = sizes.iter().zip(&out).zip(caps).filter(|((_, o), c)| **o < **c).map(|((s, _), _)| *s).sum();
        if total == 0 {
            break;
        }
        // the group furthest below its proportional share gets the next slot
        let best = (0..g)
            .filter(|&i| out[i] < caps[i])
            .max_by(|&a, &b| {
                let da = sizes[a] as f64 * m as f64 / sizes.iter().sum::<usize>() as f64 - out[a] as f64;
                let db = sizes[b] as f64 * m as f64 / sizes.iter().sum::<usize>() as f64 - out[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("a group has room");
        out[best] += 1;
        left -= 1;
    }
    out
}

/// Lloyd's algorithm with k-means++ seeding over distinct points.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if points.len() <= k {
        return points.to_vec();
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if pick < *di {
                chosen = i;
                break;
            }
            pick -= di;
        }
        centers.push(points[chosen].clone());
    }
    for _ in 0..50 {
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let j = (0..k)
                .min_by(|&a, &b| dist(p, &centers[a]).total_cmp(&dist(p, &centers[b])))
                .expect("k ≥ 1");
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            if c != centers[j] {
                moved = true;
                centers[j] = c;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}
