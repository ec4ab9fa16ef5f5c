//! Predictive distribution of latent codes at new covariate rows, and its
//! push-forward through the decoder.
//!
//! Queries whose id matches a training instance pick up that instance's
//! block of the instance part, which is what individualizes forecasts; an
//! unseen id only sees the candidate part.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariates::{CovariateMatrix, InstanceBlock, Rows};
use crate::error::{LvaeError, Result};
use crate::kernels::{AdditivePrior, DimPrior};
use crate::kl::system::StructuredSystem;
use crate::kl::{InducingPosterior, InducingState, VariationalMoments};
use crate::linalg::{symmetrize, Factor};
use crate::nnet::Decoder;

/// Default training-set size up to which [`predict_latent`] uses the exact path.
pub const EXACT_PATH_CAP: usize = 2000;

/// Default number of Monte-Carlo draws for observation-space prediction.
pub const DEFAULT_MC_SAMPLES: usize = 25;

/// Per-query predictive means and variances of one latent dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DimPredictive {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Predictive moments for all latent dimensions, `L×N*`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPredictive {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

impl LatentPredictive {
    fn from_dims(dims: Vec<DimPredictive>, n_query: usize) -> Self {
        let l = dims.len();
        let mut mean = DMatrix::zeros(l, n_query);
        let mut var = DMatrix::zeros(l, n_query);
        for (i, d) in dims.into_iter().enumerate() {
            mean.set_row(i, &d.mean.transpose());
            var.set_row(i, &d.var.transpose());
        }
        LatentPredictive { mean, var }
    }
}

fn check_query(query: Rows<'_>, x: &CovariateMatrix) -> Result<()> {
    if query.width() != x.schema().len() {
        return Err(LvaeError::Schema(format!(
            "query rows have {} columns, training covariates {}",
            query.width(),
            x.schema().len()
        )));
    }
    Ok(())
}

/// Dense predictive: `μ* = K_{*X} Σ⁻¹ μ̄`,
/// `σ²* = k** − K_{*X}Σ⁻¹K_{X*} + K_{*X}Σ⁻¹WΣ⁻¹K_{X*} + σ_z²`.
pub fn predict_latent_exact(
    query: Rows<'_>,
    x: &CovariateMatrix,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    dim: DimPrior<'_>,
) -> Result<DimPredictive> {
    check_query(query, x)?;
    let n = x.len();
    if mu.len() != n || w.len() != n {
        return Err(LvaeError::Shape("moments do not match the training rows".into()));
    }
    let mut sigma = dim.kernel(x.view(), x.view())?;
    for i in 0..n {
        sigma[(i, i)] += dim.noise();
    }
    let f = Factor::new_in_place(&mut sigma, "prior covariance")?;
    let k_xq = dim.kernel(x.view(), query)?;
    let a = f.solve(&k_xq);
    let mean = a.transpose() * mu;
    let var = DVector::from_fn(query.len(), |i, _| {
        let row = query.row(i);
        let k_qq: f64 = dim.terms.iter().map(|t| t.eval(row, row)).sum();
        let col = a.column(i);
        let reduce = k_xq.column(i).dot(&col);
        let inflate: f64 = col.iter().zip(w.iter()).map(|(c, wi)| c * c * wi).sum();
        k_qq - reduce + inflate + dim.noise()
    });
    Ok(DimPredictive { mean, var })
}

/// `K⁽ᴿ⁾(x*, Xₚ) v_p` for the block sharing the query's id, or 0.
/// Returns the block index, the block, and the cross-covariance vector.
fn instance_cross(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    query_row: &[Option<f64>],
) -> Result<Option<(usize, InstanceBlock, DVector<f64>)>> {
    let id_col = x.schema().id_index();
    let Some(id) = query_row[id_col] else {
        return Ok(None);
    };
    let Some(&block) = x.block_of_id(id as i64) else {
        return Ok(None);
    };
    let p = x.blocks().iter().position(|b| b.id == block.id).expect("block listed");
    let rows = x.block_view(p);
    let mut k = DVector::zeros(block.len);
    for (j, kj) in k.iter_mut().enumerate() {
        *kj = dim.r_terms().map(|t| t.eval(query_row, rows.row(j))).sum();
    }
    Ok(Some((p, block, k)))
}

/// Sparse predictive mean by the Woodbury recipe:
///
/// 1. `Σ̂⁻¹μ̄` block by block;
/// 2. `K_XS U⁻¹ K_SX (Σ̂⁻¹μ̄)` through the `M×M` capacitance `U`;
/// 3. `μ̃ = Σ̂⁻¹μ̄ − Σ̂⁻¹K_XS U⁻¹K_SXΣ̂⁻¹μ̄`;
/// 4. `K_{*S} K_SS⁻¹ K_SX μ̃`;
/// 5. `K⁽ᴿ⁾_{*X} μ̃`, visiting only the block of the query's instance;
/// 6. the sum of 4 and 5.
///
/// Variances are reported in the variational form at the optimal inducing
/// posterior for these moments.
pub fn predict_latent_sparse(
    query: Rows<'_>,
    x: &CovariateMatrix,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    dim: DimPrior<'_>,
    s: Rows<'_>,
) -> Result<DimPredictive> {
    check_query(query, x)?;
    if mu.len() != x.len() || w.len() != x.len() {
        return Err(LvaeError::Shape("moments do not match the training rows".into()));
    }
    let sys = StructuredSystem::new(dim, x, s)?;
    let vf = sys.v_factor()?;
    let b_mu = sys.apply_inv_blocks_vec(mu);
    let c = sys.u.transpose() * mu;
    let vinv_c = vf.solve_vec(&c);
    let mu_tilde = &b_mu - &sys.u * &vinv_c;
    let alpha = &sys.j * (sys.kxs.transpose() * &mu_tilde);
    let k_qs = dim.a_kernel(query, s)?;
    let mut mean = &k_qs * &alpha;
    for i in 0..query.len() {
        if let Some((_, b, k)) = instance_cross(dim, x, query.row(i))? {
            mean[i] += k.dot(&mu_tilde.rows(b.start, b.len));
        }
    }
    // optimal posterior: H = K V⁻¹ K, m = K V⁻¹ K_SX Σ̂⁻¹ μ̄
    let vinv_k = vf.solve(&sys.kss);
    let mut h = &sys.kss * vinv_k;
    symmetrize(&mut h);
    let m = &sys.kss * vinv_c;
    let var = variational_var(&sys, query, &k_qs, &InducingPosterior { m, h })?;
    Ok(DimPredictive { mean, var })
}

/// Predictive in terms of the inducing posterior:
/// mean `K_{*S}K⁻¹m + K⁽ᴿ⁾_{*X}Σ̂⁻¹(μ̄ − K_XS K⁻¹m)`, and variance
/// `a K⁻¹HK⁻¹ aᵀ + σ_z² + k⁽ᴿ⁾** − K⁽ᴿ⁾_{*X}Σ̂⁻¹K⁽ᴿ⁾_{X*}` with
/// `a = K_{*S} − K⁽ᴿ⁾_{*X}Σ̂⁻¹K_XS`.
pub fn predict_latent_variational(
    query: Rows<'_>,
    x: &CovariateMatrix,
    mu: &DVector<f64>,
    dim: DimPrior<'_>,
    s: Rows<'_>,
    post: &InducingPosterior,
) -> Result<DimPredictive> {
    check_query(query, x)?;
    if mu.len() != x.len() {
        return Err(LvaeError::Shape("means do not match the training rows".into()));
    }
    if post.m.len() != s.len() || post.h.shape() != (s.len(), s.len()) {
        return Err(LvaeError::Shape("inducing posterior does not match the inducing rows".into()));
    }
    let sys = StructuredSystem::new(dim, x, s)?;
    let alpha = &sys.j * &post.m;
    let resid = mu - &sys.kxs * &alpha;
    let b_resid = sys.apply_inv_blocks_vec(&resid);
    let k_qs = dim.a_kernel(query, s)?;
    let mut mean = &k_qs * &alpha;
    for i in 0..query.len() {
        if let Some((_, b, k)) = instance_cross(dim, x, query.row(i))? {
            mean[i] += k.dot(&b_resid.rows(b.start, b.len));
        }
    }
    let var = variational_var(&sys, query, &k_qs, post)?;
    Ok(DimPredictive { mean, var })
}

fn variational_var(
    sys: &StructuredSystem<'_>,
    query: Rows<'_>,
    k_qs: &DMatrix<f64>,
    post: &InducingPosterior,
) -> Result<DVector<f64>> {
    let dim = sys.dim;
    let c = &sys.j * &post.h * &sys.j;
    let mut var = DVector::zeros(query.len());
    for i in 0..query.len() {
        let row = query.row(i);
        let mut a = k_qs.row(i).transpose();
        let mut schur = 0.0;
        if let Some((p, b, k)) = instance_cross(dim, sys.x, row)? {
            let bk = &sys.blocks[p].inv * &k;
            a -= sys.u.rows(b.start, b.len).transpose() * &k;
            schur = k.dot(&bk);
        }
        let k_rr: f64 = dim.r_terms().map(|t| t.eval(row, row)).sum();
        var[i] = (a.transpose() * &c * &a)[(0, 0)] + dim.noise() + k_rr - schur;
    }
    Ok(var)
}

/// Which latent predictive to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictivePath {
    /// Exact when the training set has at most `cap` rows, sparse otherwise.
    Auto { cap: usize },
    Exact,
    Sparse,
    /// Uses the inducing posteriors stored in the state.
    Variational,
}

impl Default for PredictivePath {
    fn default() -> Self {
        PredictivePath::Auto { cap: EXACT_PATH_CAP }
    }
}

/// Predictive over all latent dimensions, in parallel across dimensions.
pub fn predict_latent(
    query: Rows<'_>,
    x: &CovariateMatrix,
    moments: &VariationalMoments,
    prior: &AdditivePrior,
    inducing: Option<&InducingState>,
    path: PredictivePath,
) -> Result<LatentPredictive> {
    use rayon::prelude::*;
    let path = match path {
        PredictivePath::Auto { cap } if x.len() > cap && inducing.is_some() => PredictivePath::Sparse,
        PredictivePath::Auto { .. } => PredictivePath::Exact,
        p => p,
    };
    if path != PredictivePath::Exact && inducing.is_none() {
        return Err(LvaeError::Config("sparse and variational prediction need inducing rows".into()));
    }
    if let (PredictivePath::Variational, Some(state)) = (path, inducing) {
        if state.posteriors.len() != prior.latent_dim() {
            return Err(LvaeError::Shape(format!(
                "{} inducing posteriors for {} latent dimensions",
                state.posteriors.len(),
                prior.latent_dim()
            )));
        }
    }
    let dims = (0..prior.latent_dim())
        .into_par_iter()
        .map(|l| {
            let (mu, w) = moments.dim(l);
            let dim = prior.dim(l);
            match (path, inducing) {
                (PredictivePath::Sparse, Some(st)) => predict_latent_sparse(query, x, &mu, &w, dim, st.s.view()),
                (PredictivePath::Variational, Some(st)) => {
                    predict_latent_variational(query, x, &mu, dim, st.s.view(), &st.posteriors[l])
                }
                _ => predict_latent_exact(query, x, &mu, &w, dim),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPredictive::from_dims(dims, query.len()))
}

/// Observation-space predictive moments, one column per query (`D×N*`).
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationPredictive {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

/// Monte-Carlo push-forward of the latent predictive through the decoder:
/// the mean of the decoded means, and the decoder variance plus the spread
/// of the decoded means.
pub fn predict_observation(
    decoder: &Decoder,
    latent: &LatentPredictive,
    mc_samples: usize,
    seed: u64,
) -> Result<ObservationPredictive> {
    if mc_samples < 1 {
        return Err(LvaeError::InvalidParameter("at least one Monte-Carlo sample is needed".into()));
    }
    let (l, n) = latent.mean.shape();
    let d = decoder.data_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DMatrix::zeros(d, n);
    let mut sum_sq = DMatrix::zeros(d, n);
    for _ in 0..mc_samples {
        let z = DMatrix::from_fn(l, n, |i, j| {
            let e: f64 = StandardNormal.sample(&mut rng);
            latent.mean[(i, j)] + latent.var[(i, j)].max(0.0).sqrt() * e
        });
        let out = decoder.decode(&z)?;
        let y = out.output();
        sum += y;
        sum_sq += y.component_mul(y);
    }
    let k = mc_samples as f64;
    let mean = sum / k;
    let obs_var = decoder.obs_var();
    let var = DMatrix::from_fn(d, n, |i, j| {
        let spread = (sum_sq[(i, j)] / k - mean[(i, j)] * mean[(i, j)]).max(0.0);
        obs_var[i] + spread
    });
    Ok(ObservationPredictive { mean, var })
}

/// One latent dimension's GP posterior given encoded training moments,
/// factored once and queried many times for joint (full-covariance)
/// predictives over a block of rows.
pub struct ConditionedDim<'a> {
    dim: DimPrior<'a>,
    x: &'a CovariateMatrix,
    factor: Factor,
    alpha: DVector<f64>,
    w: DVector<f64>,
}

impl<'a> ConditionedDim<'a> {
    pub fn new(
        dim: DimPrior<'a>,
        x: &'a CovariateMatrix,
        mu: &DVector<f64>,
        w: &DVector<f64>,
        dense_cap: usize,
    ) -> Result<Self> {
        let n = x.len();
        if mu.len() != n || w.len() != n {
            return Err(LvaeError::Shape("moments do not match the training rows".into()));
        }
        if n > dense_cap {
            return Err(LvaeError::DenseCap {
                what: "conditioning covariance",
                rows: n,
                cols: n,
                cap: dense_cap,
            });
        }
        let mut sigma = dim.kernel(x.view(), x.view())?;
        for i in 0..n {
            sigma[(i, i)] += dim.noise();
        }
        let factor = Factor::new_in_place(&mut sigma, "prior covariance")?;
        let alpha = factor.solve_vec(mu);
        Ok(ConditionedDim {
            dim,
            x,
            factor,
            alpha,
            w: w.clone(),
        })
    }

    /// Joint predictive `N(μ*, Σ*)` over `query`:
    /// `μ* = K_{*X}Σ⁻¹μ̄`,
    /// `Σ* = K_{**} + σ_z²I − K_{*X}Σ⁻¹K_{X*} + K_{*X}Σ⁻¹WΣ⁻¹K_{X*}`.
    pub fn joint(&self, query: Rows<'_>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_query(query, self.x)?;
        let k_xq = self.dim.kernel(self.x.view(), query)?;
        let a = self.factor.solve(&k_xq);
        let mean = k_xq.transpose() * &self.alpha;
        let mut wa = a.clone();
        for (i, mut row) in wa.row_iter_mut().enumerate() {
            row *= self.w[i];
        }
        let mut cov = self.dim.kernel(query, query)? - k_xq.transpose() * &a + a.transpose() * wa;
        for i in 0..query.len() {
            cov[(i, i)] += self.dim.noise();
        }
        symmetrize(&mut cov);
        Ok((mean, cov))
    }
}
