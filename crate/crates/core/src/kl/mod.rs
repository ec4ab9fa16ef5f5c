//! KL divergence between the amortized posterior `q(Z)` and the additive GP
//! prior, per latent dimension, and its upper bounds.
//!
//! * [`kl_exact`]: dense Cholesky evaluation.
//! * [`bound_d1`]: the bound induced by the collapsed sparse GP lower bound,
//!   with inducing points in the full covariate space.
//! * [`bound_d2_efficient`] / [`bound_d2_dense`]: the structured bound that
//!   keeps the block-diagonal instance part exact and approximates only the
//!   candidate part through inducing points.
//! * [`svi_d4_full`] / [`svi_d4_minibatch`]: the uncollapsed bound with an
//!   explicit Gaussian inducing posterior, estimated from batches of whole
//!   instances and optimized with natural gradients.

mod exact;
mod structured;
mod svi;
pub(crate) mod system;
pub mod verify;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::Points;
use crate::error::{LvaeError, Result};

pub use exact::{kl_exact, kl_exact_dim, kl_exact_with_grad};
pub use structured::{bound_d1, bound_d2_dense, bound_d2_efficient, bound_d2_with_grad, d1_with_grad};
pub use svi::{
    d4_natural_gradient_step, d4_with_grad, optimal_posterior, svi_d4_full, svi_d4_minibatch, D4Grad,
    MAX_STEP_HALVINGS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundKind {
    Exact,
    D1,
    D2,
    D2Dense,
    D4,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Exact => "exact",
            BoundKind::D1 => "d1",
            BoundKind::D2 => "d2",
            BoundKind::D2Dense => "d2-dense",
            BoundKind::D4 => "d4",
        }
    }
}

/// Encoder means and variances, one row per latent dimension (`L×N`).
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalMoments {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

impl VariationalMoments {
    pub fn new(mean: DMatrix<f64>, var: DMatrix<f64>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(LvaeError::Shape(format!(
                "means {:?} and variances {:?} differ in shape",
                mean.shape(),
                var.shape()
            )));
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(LvaeError::InvalidParameter("encoder variances must be positive".into()));
        }
        Ok(VariationalMoments { mean, var })
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn len(&self) -> usize {
        self.mean.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.ncols() == 0
    }

    pub fn dim(&self, l: usize) -> (DVector<f64>, DVector<f64>) {
        (self.mean.row(l).transpose(), self.var.row(l).transpose())
    }
}

/// Gaussian posterior `q(u) = N(m, H)` over the inducing values of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingPosterior {
    pub m: DVector<f64>,
    pub h: DMatrix<f64>,
}

impl InducingPosterior {
    pub fn prior_like(kss: &DMatrix<f64>) -> Self {
        InducingPosterior {
            m: DVector::zeros(kss.nrows()),
            h: kss.clone(),
        }
    }
}

/// Inducing locations (rows in the candidate covariate space) and one
/// posterior per latent dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingState {
    pub s: Points,
    pub posteriors: Vec<InducingPosterior>,
}

/// Gradient of a per-dimension bound with respect to everything the Adam
/// optimizer owns.
#[derive(Clone, Debug, PartialEq)]
pub struct DimGrad {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    /// Unconstrained kernel parameters of this dimension, term by term.
    pub params: Vec<f64>,
    /// Inducing-location gradient, `M×Q`; only continuous columns read by an
    /// `se` factor are nonzero.
    pub inducing: DMatrix<f64>,
}

/// A per-dimension KL value tagged with the computation that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimValue {
    pub kind: BoundKind,
    pub value: f64,
}

/// Sums per-dimension values; all must come from the same bound.
pub fn kl_total(values: &[DimValue]) -> Result<f64> {
    let Some(first) = values.first() else {
        return Err(LvaeError::InvalidParameter("no latent dimensions".into()));
    };
    if let Some(other) = values.iter().find(|v| v.kind != first.kind) {
        return Err(LvaeError::InvalidParameter(format!(
            "cannot sum {} and {} values",
            first.kind.name(),
            other.kind.name()
        )));
    }
    Ok(values.iter().map(|v| v.value).sum())
}

fn check_moments(mu: &DVector<f64>, w: &DVector<f64>, n: usize) -> Result<()> {
    if mu.len() != n || w.len() != n {
        return Err(LvaeError::Shape(format!(
            "moments of length {} and {} for {n} rows",
            mu.len(),
            w.len()
        )));
    }
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(LvaeError::InvalidParameter("variances must be positive".into()));
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(LvaeError::NonFinite("means".into()));
    }
    Ok(())
}

fn sum_log(w: &DVector<f64>) -> f64 {
    w.iter().map(|v| v.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_rejects_mixed_kinds() {
        let vals = [
            DimValue { kind: BoundKind::D2, value: 1.0 },
            DimValue { kind: BoundKind::Exact, value: 2.0 },
        ];
        assert!(kl_total(&vals).is_err());
        assert_eq!(kl_total(&vals[..1]).unwrap(), 1.0);
    }

    #[test]
    fn total_is_order_free() {
        let vals: Vec<_> = [0.3, 1.7, 2.25]
            .iter()
            .map(|&value| DimValue { kind: BoundKind::D4, value })
            .collect();
        let mut rev = vals.clone();
        rev.reverse();
        assert_eq!(kl_total(&vals).unwrap(), 4.25);
        assert_eq!(kl_total(&rev).unwrap(), 4.25);
    }
}
