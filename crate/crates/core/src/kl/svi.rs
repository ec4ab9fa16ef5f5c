use nalgebra::{Cholesky, DMatrix, DVector};

use super::structured::kernel_grads;
use super::system::StructuredSystem;
use super::{check_moments, sum_log, DimGrad, InducingPosterior};
use crate::covariates::{CovariateMatrix, InstanceBatch, Rows};
use crate::error::{LvaeError, Result};
use crate::kernels::{AdditivePrior, DimPrior};
use crate::linalg::{symmetrize, trace_of_product, Factor};

/// How many times a natural-gradient step is halved before giving up.
pub const MAX_STEP_HALVINGS: usize = 10;

/// Gradient of the uncollapsed bound: the Adam-owned part and the
/// inducing-posterior part.
#[derive(Clone, Debug, PartialEq)]
pub struct D4Grad {
    pub dim: DimGrad,
    pub m: DVector<f64>,
    pub h: DMatrix<f64>,
}

/// Uncollapsed bound over all instances of `x`.
pub fn svi_d4_full(
    mu: &DVector<f64>,
    w: &DVector<f64>,
    prior: &AdditivePrior,
    l: usize,
    x: &CovariateMatrix,
    s: Rows<'_>,
    post: &InducingPosterior,
) -> Result<f64> {
    d4(prior.dim(l), x, s, mu, w, post, 1.0, x.len(), false).map(|(v, _)| v)
}

/// Unbiased estimate of [`svi_d4_full`] from a batch of whole instances.
/// `mu_sub` and `w_sub` are the batch rows.
pub fn svi_d4_minibatch(
    mu_sub: &DVector<f64>,
    w_sub: &DVector<f64>,
    prior: &AdditivePrior,
    l: usize,
    batch: &InstanceBatch,
    s: Rows<'_>,
    post: &InducingPosterior,
) -> Result<f64> {
    d4(
        prior.dim(l),
        &batch.x,
        s,
        mu_sub,
        w_sub,
        post,
        batch.scale(),
        batch.total_rows,
        false,
    )
    .map(|(v, _)| v)
}

/// Value and gradient of the (possibly batch-scaled) uncollapsed bound.
/// `scale` multiplies the per-instance terms; `total_rows` is the row count
/// of the full data set.
#[allow(clippy::too_many_arguments)]
pub fn d4_with_grad(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    s: Rows<'_>,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    post: &InducingPosterior,
    scale: f64,
    total_rows: usize,
) -> Result<(f64, D4Grad)> {
    let (v, g) = d4(dim, x, s, mu, w, post, scale, total_rows, true)?;
    Ok((v, g.expect("gradient requested")))
}

#[allow(clippy::too_many_arguments)]
fn d4(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    s: Rows<'_>,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    post: &InducingPosterior,
    scale: f64,
    total_rows: usize,
    want_grad: bool,
) -> Result<(f64, Option<D4Grad>)> {
    check_moments(mu, w, x.len())?;
    let m_len = s.len();
    if post.m.len() != m_len || post.h.shape() != (m_len, m_len) {
        return Err(LvaeError::Shape(format!(
            "inducing posterior of size {} / {:?} for {m_len} inducing rows",
            post.m.len(),
            post.h.shape()
        )));
    }
    let h_chol = Cholesky::new(post.h.clone())
        .filter(|c| c.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()))
        .ok_or(LvaeError::NotPositiveDefinite {
            what: "inducing posterior covariance",
            jitter: 0.0,
        })?;
    let h_logdet = 2.0 * h_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let sys = StructuredSystem::new(dim, x, s)?;
    let j = &sys.j;
    let m = &post.m;
    let h = &post.h;
    let alpha = j * m;
    let c_mat = j * h * j;
    let r = &sys.kxs * &alpha - mu;
    let br = sys.apply_inv_blocks_vec(&r);

    let mut diag_bw = 0.0;
    for (b, bs) in x.blocks().iter().zip(&sys.blocks) {
        for i in 0..b.len {
            diag_bw += bs.inv[(i, i)] * w[b.start + i];
        }
    }
    let (corr_a, kaa) = sys.candidate_block_traces()?;
    let c_minus_j = &c_mat - j;
    let per_instance = r.dot(&br) + diag_bw + sys.sigma_hat_logdet() + corr_a
        + trace_of_product(&c_minus_j, &sys.phi)
        - sum_log(w);
    let kl_u = 0.5
        * (trace_of_product(j, h) + m.dot(&alpha) - m_len as f64 + sys.kss_factor.logdet() - h_logdet);
    let value = 0.5 * scale * per_instance - 0.5 * total_rows as f64 + kl_u;
    if !value.is_finite() {
        return Err(LvaeError::NonFinite("uncollapsed bound".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }

    let n = x.len();
    let d_mu = -scale * &br;
    let mut d_w = DVector::zeros(n);
    let alpha_bar = scale * (sys.kxs.transpose() * &br);
    let mut kxs_bar = &br * alpha.transpose() + &sys.u * &c_minus_j;
    kxs_bar *= scale;

    let mut sigma_hat_bars = Vec::with_capacity(sys.blocks.len());
    let mut ka_bars = Vec::with_capacity(sys.blocks.len());
    for ((b, bs), k_aa) in x.blocks().iter().zip(&sys.blocks).zip(&kaa) {
        let rp = r.rows(b.start, b.len);
        let wp = w.rows(b.start, b.len);
        let kxs_p = sys.kxs.rows(b.start, b.len);
        let mut b_bar = k_aa + kxs_p * &c_minus_j * kxs_p.transpose();
        b_bar.ger(1.0, &rp, &rp, 1.0);
        for i in 0..b.len {
            b_bar[(i, i)] += wp[i];
            d_w[b.start + i] = 0.5 * scale * (bs.inv[(i, i)] - 1.0 / wp[i]);
        }
        b_bar *= 0.5 * scale;
        let sh_bar = 0.5 * scale * &bs.inv - &bs.inv * b_bar * &bs.inv;
        sigma_hat_bars.push(sh_bar);
        ka_bars.push(0.5 * scale * &bs.inv);
    }

    let c_bar = 0.5 * scale * &sys.phi;
    let jh = j * h;
    let mut j_bar = -&c_bar + &c_bar * &jh + jh.transpose() * &c_bar + 0.5 * h;
    j_bar.ger(1.0, &alpha_bar, m, 1.0);
    j_bar.ger(0.5, m, m, 1.0);
    let kss_bar = 0.5 * j - j * &j_bar * j;
    let (params, inducing) = kernel_grads(&sys, &kxs_bar, &kss_bar, &sigma_hat_bars, &ka_bars);

    let d_m = j * (&alpha_bar + m);
    let h_inv = {
        let mut inv = h_chol.inverse();
        symmetrize(&mut inv);
        inv
    };
    let mut d_h = j * &c_bar * j + 0.5 * j - 0.5 * h_inv;
    symmetrize(&mut d_h);
    Ok((
        value,
        Some(D4Grad {
            dim: DimGrad {
                mean: d_mu,
                var: d_w,
                params,
                inducing,
            },
            m: d_m,
            h: d_h,
        }),
    ))
}

/// One natural-gradient update of `(m, H)` from `∂D̂4/∂m` and `∂D̂4/∂H`.
///
/// The step is halved (up to [`MAX_STEP_HALVINGS`] times) whenever the
/// updated precision is not positive definite.
pub fn d4_natural_gradient_step(
    post: &InducingPosterior,
    d_m: &DVector<f64>,
    d_h: &DMatrix<f64>,
    step: f64,
) -> Result<InducingPosterior> {
    if !(0.0..=1.0).contains(&step) {
        return Err(LvaeError::InvalidParameter(format!("step {step} outside [0, 1]")));
    }
    if step == 0.0 {
        return Ok(post.clone());
    }
    let h_inv = Factor::new(&post.h, "inducing posterior covariance")?.inverse();
    let h_inv_m = &h_inv * &post.m;
    let dh_m = d_h * &post.m;
    let mut step = step;
    for _ in 0..=MAX_STEP_HALVINGS {
        let mut prec = &h_inv + 2.0 * step * d_h;
        symmetrize(&mut prec);
        if let Some(chol) = Cholesky::new(prec) {
            if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                let mut h = chol.inverse();
                symmetrize(&mut h);
                let rhs = &h_inv_m - step * (d_m - 2.0 * &dh_m);
                let m = chol.solve(&rhs);
                return Ok(InducingPosterior { m, h });
            }
        }
        step *= 0.5;
    }
    Err(LvaeError::NotPositiveDefinite {
        what: "natural-gradient precision update",
        jitter: 0.0,
    })
}

/// The minimizer of the uncollapsed bound over `(m, H)` for fixed moments:
/// `H = (K⁻¹ Φ K⁻¹ + K⁻¹)⁻¹`, `m = H K⁻¹ K_SX Σ̂⁻¹ μ̄`.
pub fn optimal_posterior(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    s: Rows<'_>,
    mu: &DVector<f64>,
) -> Result<InducingPosterior> {
    let sys = StructuredSystem::new(dim, x, s)?;
    let j = &sys.j;
    let mut prec = j * &sys.phi * j + j;
    symmetrize(&mut prec);
    let f = Factor::new(&prec, "optimal inducing precision")?;
    let h = f.inverse();
    let m = f.solve_vec(&(j * (sys.u.transpose() * mu)));
    Ok(InducingPosterior { m, h })
}
