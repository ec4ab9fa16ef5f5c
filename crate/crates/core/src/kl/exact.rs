use nalgebra::{DMatrix, DVector};

use super::{check_moments, sum_log, DimGrad};
use crate::covariates::CovariateMatrix;
use crate::error::{LvaeError, Result};
use crate::kernels::{AdditivePrior, DimPrior, TermPart, DEFAULT_DENSE_CAP};
use crate::linalg::Factor;

/// `KL(N(μ̄, diag w) ‖ N(0, Σ))`.
pub fn kl_exact(mu: &DVector<f64>, w: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.nrows() != sigma.ncols() {
        return Err(LvaeError::Shape("prior covariance must be square".into()));
    }
    check_moments(mu, w, sigma.nrows())?;
    let f = Factor::new(sigma, "prior covariance")?;
    Ok(kl_from_factor(mu, w, &f))
}

pub(crate) fn kl_from_factor(mu: &DVector<f64>, w: &DVector<f64>, f: &Factor) -> f64 {
    let n = mu.len();
    // tr(Σ⁻¹W) = Σᵢ wᵢ ‖L⁻¹eᵢ‖² = ‖L⁻¹ W^{1/2}‖²_F
    let sqrt_w = DMatrix::from_diagonal(&w.map(f64::sqrt));
    let trace = f.solve_lower(&sqrt_w).norm_squared();
    let lmu = f.solve_lower(&DMatrix::from_column_slice(n, 1, mu.as_slice()));
    let quad = lmu.norm_squared();
    0.5 * (trace + quad - n as f64 + f.logdet() - sum_log(w))
}

/// Exact KL of one latent dimension against the assembled prior covariance.
pub fn kl_exact_dim(
    mu: &DVector<f64>,
    w: &DVector<f64>,
    prior: &AdditivePrior,
    l: usize,
    x: &CovariateMatrix,
) -> Result<f64> {
    let sigma = crate::kernels::assemble_sigma(prior, l, x)?;
    kl_exact(mu, w, &sigma)
}

/// Exact KL and its gradient with respect to the moments and kernel parameters.
pub fn kl_exact_with_grad(
    dim: DimPrior<'_>,
    x: &CovariateMatrix,
    mu: &DVector<f64>,
    w: &DVector<f64>,
    dense_cap: Option<usize>,
) -> Result<(f64, DimGrad)> {
    let n = x.len();
    let cap = dense_cap.unwrap_or(DEFAULT_DENSE_CAP);
    if n > cap {
        return Err(LvaeError::DenseCap {
            what: "prior covariance",
            rows: n,
            cols: n,
            cap,
        });
    }
    check_moments(mu, w, n)?;
    let mut sigma = dim.kernel(x.view(), x.view())?;
    for i in 0..n {
        sigma[(i, i)] += dim.noise();
    }
    let f = Factor::new_in_place(&mut sigma, "prior covariance")?;
    let inv = f.inverse();
    let a = &inv * mu;
    let trace: f64 = (0..n).map(|i| inv[(i, i)] * w[i]).sum();
    let value = 0.5 * (trace + mu.dot(&a) - n as f64 + f.logdet() - sum_log(w));

    // G = ½(Σ⁻¹ − Σ⁻¹WΣ⁻¹ − aaᵀ)
    let mut inv_w = inv.clone();
    for (j, mut col) in inv_w.column_iter_mut().enumerate() {
        col *= w[j];
    }
    let mut g = &inv - &inv_w * &inv;
    g.ger(-1.0, &a, &a, 1.0);
    g *= 0.5;

    let mut params = vec![0.0; dim.n_params()];
    dim.sum_vjp(TermPart::All, x.view(), x.view(), &g, &mut params, None, None);
    let d_w = DVector::from_fn(n, |i, _| 0.5 * inv[(i, i)] - 0.5 / w[i]);
    Ok((
        value,
        DimGrad {
            mean: a,
            var: d_w,
            params,
            inducing: DMatrix::zeros(0, x.schema().len()),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn identical_distributions() {
        let kl = kl_exact(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn scalar_cases() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!((kl_exact(&v(&[1.0]), &v(&[1.0]), &one).unwrap() - 0.5).abs() < 1e-15);
        let two = DMatrix::from_element(1, 1, 2.0);
        let kl = kl_exact(&v(&[0.0]), &v(&[0.5]), &two).unwrap();
        // ½(0.25 − 1 + ln 2 − ln 0.5)
        let hand = 0.5 * (0.25 - 1.0 + 2.0f64.ln() - 0.5f64.ln());
        assert!((kl - hand).abs() < 1e-15);
        assert!((kl - 0.318_147_2).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_variances() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(kl_exact(&v(&[0.0]), &v(&[0.0]), &one).is_err());
        assert!(kl_exact(&v(&[0.0, 1.0]), &v(&[1.0]), &one).is_err());
    }
}
