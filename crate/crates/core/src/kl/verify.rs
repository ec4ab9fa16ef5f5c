//! Seeded random problem instances for checking the ordering and agreement
//! of the KL computations.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{bound_d1, bound_d2_dense, bound_d2_efficient, kl_exact_dim, optimal_posterior, svi_d4_full};
use crate::covariates::{CovariateMatrix, CovariateSchema, Points};
use crate::error::Result;
use crate::kernels::{parse_prior_spec, AdditivePrior, KernelTerm};

/// The term list used for random instances.
pub const RANDOM_PRIOR: &str =
    "ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age) + bi_x_se(diseasePresence,diseaseAge)";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceLimits {
    pub max_instances: usize,
    pub max_rows_per_instance: usize,
    pub max_inducing: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        InstanceLimits {
            max_instances: 6,
            max_rows_per_instance: 10,
            max_inducing: 10,
        }
    }
}

/// One latent dimension's worth of inputs to every bound.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub seed: u64,
    pub x: CovariateMatrix,
    pub prior: AdditivePrior,
    pub mu: DVector<f64>,
    pub w: DVector<f64>,
    /// Inducing rows in the full covariate space (rows of `x`).
    pub s_full: Points,
    /// The same rows with the instance id blanked.
    pub s_candidate: Points,
}

/// Random covariates with continuous ages, random kernel parameters,
/// random moments, and `S` a random subset of the rows of `X`.
pub fn random_instance(seed: u64, limits: InstanceLimits) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=limits.max_instances);
    let sizes: Vec<usize> = (0..p)
        .map(|_| rng.random_range(1..=limits.max_rows_per_instance))
        .collect();
    let x = random_covariates(&mut rng, &sizes)?;
    let n = x.len();
    let m = rng.random_range(1..=limits.max_inducing.min(n));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    finish(seed, &mut rng, x, &idx)
}

/// Like [`random_instance`] but with every row of `X` used as an inducing row.
/// Ages are distinct across the whole data set (spacing about 1) and
/// lengthscales short, so that `K_SS` is well conditioned.
pub fn spanning_instance(seed: u64, limits: InstanceLimits) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=limits.max_instances);
    let sizes: Vec<usize> = (0..p)
        .map(|_| rng.random_range(1..=limits.max_rows_per_instance))
        .collect();
    let x = separated_covariates(&mut rng, &sizes)?;
    let idx: Vec<usize> = (0..x.len()).collect();
    finish_with(seed, &mut rng, x, &idx, 0.5..1.0)
}

/// Instances of fixed size used for timing and unbiasedness checks.
pub fn sized_instance(seed: u64, sizes: &[usize], m: usize) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_covariates(&mut rng, sizes)?;
    let n = x.len();
    let idx: Vec<usize> = (0..m.min(n)).map(|i| i * n / m.min(n)).collect();
    finish(seed, &mut rng, x, &idx)
}

fn random_covariates(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Result<CovariateMatrix> {
    let schema = CovariateSchema::longitudinal();
    let mut values = Vec::new();
    for (id, &np) in sizes.iter().enumerate() {
        let sex = f64::from(rng.random_range(0..2u8));
        let diseased = rng.random_bool(0.5);
        let onset = rng.random_range(2.0..8.0);
        let location = f64::from(rng.random_range(0..2u8));
        let mut ages: Vec<f64> = (0..np).map(|_| rng.random_range(0.0..10.0)).collect();
        ages.sort_by(f64::total_cmp);
        for age in ages {
            values.extend([
                Some(id as f64),
                Some(age),
                Some(sex),
                Some(f64::from(u8::from(diseased))),
                diseased.then_some(age - onset),
                Some(location),
            ]);
        }
    }
    CovariateMatrix::new(schema.clone(), Points::new(schema.len(), values)?)
}

fn separated_covariates(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Result<CovariateMatrix> {
    let n: usize = sizes.iter().sum();
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let schema = CovariateSchema::longitudinal();
    let mut values = Vec::new();
    let mut next = 0;
    for (id, &np) in sizes.iter().enumerate() {
        let sex = f64::from(rng.random_range(0..2u8));
        let diseased = rng.random_bool(0.5);
        let onset = rng.random_range(0.2 * n as f64..0.8 * n as f64);
        let location = f64::from(rng.random_range(0..2u8));
        let mut ages: Vec<f64> = slots[next..next + np]
            .iter()
            .map(|&k| k as f64 + rng.random_range(0.0..0.2))
            .collect();
        next += np;
        ages.sort_by(f64::total_cmp);
        for age in ages {
            values.extend([
                Some(id as f64),
                Some(age),
                Some(sex),
                Some(f64::from(u8::from(diseased))),
                diseased.then_some(age - onset),
                Some(location),
            ]);
        }
    }
    CovariateMatrix::new(schema.clone(), Points::new(schema.len(), values)?)
}

fn finish(seed: u64, rng: &mut ChaCha8Rng, x: CovariateMatrix, idx: &[usize]) -> Result<RandomInstance> {
    finish_with(seed, rng, x, idx, 0.7..2.5)
}

fn finish_with(
    seed: u64,
    rng: &mut ChaCha8Rng,
    x: CovariateMatrix,
    idx: &[usize],
    lengthscales: std::ops::Range<f64>,
) -> Result<RandomInstance> {
    let schema = x.schema().clone();
    let specs = parse_prior_spec(RANDOM_PRIOR, &schema)?;
    let terms = specs
        .into_iter()
        .map(|spec| {
            let scale = rng.random_range(0.3f64..3.0);
            let l = spec.se_column().map(|_| rng.random_range(lengthscales.clone()));
            KernelTerm::new(spec, scale, l)
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = AdditivePrior::from_terms(vec![terms], &schema)?;
    let n = x.len();
    let mu = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let w = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.5));
    let s_full = x.points().select(idx);
    let mut s_candidate = s_full.clone();
    for i in 0..s_candidate.len() {
        s_candidate.set(i, schema.id_index(), None);
    }
    Ok(RandomInstance {
        seed,
        x,
        prior,
        mu,
        w,
        s_full,
        s_candidate,
    })
}

/// Every KL computation on one random instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub kl_exact: f64,
    pub d1: f64,
    pub d2_dense: f64,
    pub d2_efficient: f64,
    pub d4_at_optimum: f64,
    /// `D2 − KL`, nonnegative up to rounding.
    pub slack_exact_d2: f64,
    /// `D1 − D2`, nonnegative up to rounding.
    pub slack_d2_d1: f64,
}

impl BoundRecord {
    /// True when either ordering is violated beyond `tol`.
    pub fn violates(&self, tol: f64) -> bool {
        self.slack_exact_d2 < -tol || self.slack_d2_d1 < -tol
    }
}

pub fn evaluate(inst: &RandomInstance) -> Result<BoundRecord> {
    let x = &inst.x;
    let kl = kl_exact_dim(&inst.mu, &inst.w, &inst.prior, 0, x)?;
    let d1 = bound_d1(&inst.mu, &inst.w, &inst.prior, 0, x, inst.s_full.view())?;
    let s = inst.s_candidate.view();
    let d2_dense = bound_d2_dense(&inst.mu, &inst.w, &inst.prior, 0, x, s)?;
    let d2 = bound_d2_efficient(&inst.mu, &inst.w, &inst.prior, 0, x, s)?;
    let post = optimal_posterior(inst.prior.dim(0), x, s, &inst.mu)?;
    let d4 = svi_d4_full(&inst.mu, &inst.w, &inst.prior, 0, x, s, &post)?;
    Ok(BoundRecord {
        seed: inst.seed,
        n: x.len(),
        p: x.n_instances(),
        m: s.len(),
        kl_exact: kl,
        d1,
        d2_dense,
        d2_efficient: d2,
        d4_at_optimum: d4,
        slack_exact_d2: d2 - kl,
        slack_d2_d1: d1 - d2,
    })
}
