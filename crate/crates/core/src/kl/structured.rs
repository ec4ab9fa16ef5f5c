use nalgebra::{DMatrix, DVector};

use super::system::StructuredSystem;
use super::{check_moments, sum_log, DimGrad};
use crate::covariates::{CovariateMatrix, Rows};
use crate::error::{LvaeError, Result};
use crate::kernels::{AdditivePrior, DimPrior, TermPart};
use crate::linalg::{trace_of_product, Factor};

/// Structured bound with the instance part exact and the candidate part
/// approximated through the inducing rows `s`, computed in
/// `O(Σₚ nₚ³ + N M²)` via the Woodbury identity.
pub fn bound_d2_efficient(
    mu: &DVector<f64>,
    w: &DVector<f64>,
    prior: &AdditivePrior,
    l: usize,
    x: &CovariateMatrix,
    s: Rows<'_>,
) -> Result<f64> {
    structured(prior.dim(l), x, s, mu, w, false).map(|(v, _)| v)
}

pub fn bound_d2_with_grad(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    s: Rows<'_>,
    mu: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<(f64, DimGrad)> {
    let (v, g) = structured(dim, x, s, mu, w, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// The bound induced by the collapsed sparse lower bound on the prior
/// marginal likelihood: every term is approximated through `s_full`, which
/// lives in the full covariate space.
pub fn bound_d1(
    mu: &DVector<f64>,
    w: &DVector<f64>,
    prior: &AdditivePrior,
    l: usize,
    x: &CovariateMatrix,
    s_full: Rows<'_>,
) -> Result<f64> {
    let dim = prior.dim(l);
    let none = vec![false; dim.terms.len()];
    let all_low_rank = DimPrior {
        terms: dim.terms,
        instance_part: &none,
    };
    structured(all_low_rank, x, s_full, mu, w, false).map(|(v, _)| v)
}

pub fn d1_with_grad(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    s_full: Rows<'_>,
    mu: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<(f64, DimGrad)> {
    let none = vec![false; dim.terms.len()];
    let all_low_rank = DimPrior {
        terms: dim.terms,
        instance_part: &none,
    };
    let (v, g) = structured(all_low_rank, x, s_full, mu, w, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Reference evaluation of the structured bound with dense N×N algebra.
pub fn bound_d2_dense(
    mu: &DVector<f64>,
    w: &DVector<f64>,
    prior: &AdditivePrior,
    l: usize,
    x: &CovariateMatrix,
    s: Rows<'_>,
) -> Result<f64> {
    let n = x.len();
    check_moments(mu, w, n)?;
    let dim = prior.dim(l);
    let mut kss = dim.a_kernel(s, s)?;
    let kss_f = Factor::new_in_place(&mut kss, "inducing covariance")?;
    let kxs = dim.a_kernel(x.view(), s)?;
    let q = &kxs * kss_f.solve(&kxs.transpose());
    let mut sigma_bar = q.clone();
    let mut correction = 0.0;
    for (p, b) in x.blocks().iter().enumerate() {
        let rows = x.block_view(p);
        let mut block = dim.instance_block(rows)?;
        let bf = Factor::new_in_place(&mut block, "instance covariance block")?;
        let mut view = sigma_bar.view_mut((b.start, b.start), (b.len, b.len));
        view += &block;
        let k_tilde = dim.a_kernel(rows, rows)? - q.view((b.start, b.start), (b.len, b.len));
        correction += bf.solve(&k_tilde).trace();
    }
    let f = Factor::new(&sigma_bar, "structured covariance")?;
    Ok(super::exact::kl_from_factor(mu, w, &f) + 0.5 * correction)
}

fn structured(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    s: Rows<'_>,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    want_grad: bool,
) -> Result<(f64, Option<DimGrad>)> {
    check_moments(mu, w, x.len())?;
    if s.width() != x.schema().len() {
        return Err(LvaeError::Schema(format!(
            "inducing rows have {} columns, covariates {}",
            s.width(),
            x.schema().len()
        )));
    }
    let sys = StructuredSystem::new(dim, x, s)?;
    let vf = sys.v_factor()?;
    let n = sys.n();

    let c = sys.u.transpose() * mu;
    let vinv_c = vf.solve_vec(&c);
    let b_mu = sys.apply_inv_blocks_vec(mu);
    let quad = mu.dot(&b_mu) - c.dot(&vinv_c);

    let mut diag_bw = 0.0;
    for (b, bs) in x.blocks().iter().zip(&sys.blocks) {
        for i in 0..b.len {
            diag_bw += bs.inv[(i, i)] * w[b.start + i];
        }
    }
    let mut uw = sys.u.clone();
    for (i, mut row) in uw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let psi = sys.u.transpose() * &uw;
    let vinv = vf.inverse();
    let trace = diag_bw - trace_of_product(&vinv, &psi);

    let logdet = sys.sigma_hat_logdet() - sys.kss_factor.logdet() + vf.logdet();
    let (corr_a, kaa) = sys.candidate_block_traces()?;
    let correction = corr_a - trace_of_product(&sys.j, &sys.phi);
    let value = 0.5 * (trace + quad - n as f64 + logdet - sum_log(w) + correction);
    if !value.is_finite() {
        return Err(LvaeError::NonFinite("structured bound".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }

    // Σ̄⁻¹μ and Σ̄⁻¹K_XS
    let a = &b_mu - &sys.u * &vinv_c;
    let e = &sys.u * (&vinv * &sys.kss);
    let mut we = e.clone();
    for (i, mut row) in we.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let sinv_we = sys.apply_inv_blocks(&we) - &sys.u * (&vinv * (sys.u.transpose() * &we));
    let g = sys.kxs.transpose() * &a;

    // G K_XS with G = ½(Σ̄⁻¹ − Σ̄⁻¹(W + μμᵀ)Σ̄⁻¹)
    let mut g_kxs = &e - &sinv_we;
    g_kxs.ger(-1.0, &a, &g, 1.0);
    g_kxs *= 0.5;
    let kxs_bar = (2.0 * &g_kxs - &sys.u) * &sys.j;

    let mut j_bar = &sys.kss - &sys.kss * &vinv * &sys.kss - e.transpose() * &we;
    j_bar.ger(-1.0, &g, &g, 1.0);
    j_bar *= 0.5;
    j_bar -= 0.5 * &sys.phi;
    let kss_bar = -(&sys.j * &j_bar * &sys.j);

    let mut d_w = DVector::zeros(n);
    let mut sigma_hat_bars = Vec::with_capacity(sys.blocks.len());
    let mut ka_bars = Vec::with_capacity(sys.blocks.len());
    for ((b, bs), k_aa) in x.blocks().iter().zip(&sys.blocks).zip(&kaa) {
        let up = sys.u.rows(b.start, b.len);
        let wp = w.rows(b.start, b.len);
        let ap = a.rows(b.start, b.len);
        let p1 = up * &vinv;
        let s_pp = &bs.inv - &p1 * up.transpose();
        let mut bw = bs.inv.clone();
        for (j, mut col) in bw.column_iter_mut().enumerate() {
            col *= wp[j];
        }
        let bwb = &bw * &bs.inv;
        let x1 = &bw * &p1 * up.transpose();
        let sws = bwb - &x1 - x1.transpose() + &p1 * &psi * p1.transpose();
        let mut g_pp = s_pp.clone() - sws;
        g_pp.ger(-1.0, &ap, &ap, 1.0);
        g_pp *= 0.5;
        let kxs_p = sys.kxs.rows(b.start, b.len);
        let k_tilde = k_aa - kxs_p * &sys.j * kxs_p.transpose();
        let sh_bar = g_pp - 0.5 * (&bs.inv * k_tilde * &bs.inv);
        for i in 0..b.len {
            d_w[b.start + i] = 0.5 * s_pp[(i, i)] - 0.5 / wp[i];
        }
        sigma_hat_bars.push(sh_bar);
        ka_bars.push(0.5 * &bs.inv);
    }
    let (params, inducing) = kernel_grads(&sys, &kxs_bar, &kss_bar, &sigma_hat_bars, &ka_bars);
    Ok((
        value,
        Some(DimGrad {
            mean: a,
            var: d_w,
            params,
            inducing,
        }),
    ))
}

/// Pulls adjoints of `K_XS`, `K_SS`, the blocks `Σ̂ₚ` and the diagonal
/// candidate blocks `K⁽ᴬ⁾_{XₚXₚ}` back to the kernel parameters and the
/// inducing locations.
pub(crate) fn kernel_grads(
    sys: &StructuredSystem<'_>,
    kxs_bar: &DMatrix<f64>,
    kss_bar: &DMatrix<f64>,
    sigma_hat_bars: &[DMatrix<f64>],
    ka_bars: &[DMatrix<f64>],
) -> (Vec<f64>, DMatrix<f64>) {
    let dim = sys.dim;
    let x = sys.x;
    let mut params = vec![0.0; dim.n_params()];
    let mut d_s = DMatrix::zeros(sys.m(), sys.s.width());
    let mut d_s2 = DMatrix::zeros(sys.m(), sys.s.width());
    dim.sum_vjp(TermPart::Candidate, x.view(), sys.s, kxs_bar, &mut params, None, Some(&mut d_s));
    dim.sum_vjp(
        TermPart::Candidate,
        sys.s,
        sys.s,
        kss_bar,
        &mut params,
        Some(&mut d_s2),
        Some(&mut d_s),
    );
    d_s += d_s2;
    for (p, (sh_bar, ka_bar)) in sigma_hat_bars.iter().zip(ka_bars).enumerate() {
        let rows = x.block_view(p);
        dim.sum_vjp(TermPart::Instance, rows, rows, sh_bar, &mut params, None, None);
        dim.sum_vjp(TermPart::Candidate, rows, rows, ka_bar, &mut params, None, None);
    }
    (params, d_s)
}
