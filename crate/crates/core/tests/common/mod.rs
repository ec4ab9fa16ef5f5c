#![allow(dead_code)]

use lvae::kernels::{parse_prior_spec, AdditivePrior, KernelTerm, DimPrior};
use lvae::linalg::Factor;
use lvae::nnet::{Activation, Architecture, ObservationSet};
use lvae::trainer::{Model, TrainData};
use lvae::{CovariateMatrix, CovariateSchema, Points, Rows};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_PRIOR: &str =
    "ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age) + bi_x_se(diseasePresence,diseaseAge)";

/// `instances` instances of `rows` rows with every fifth observation
/// missing; even ids are diseased with onset at age 1.5.
pub fn toy_data(seed: u64, instances: usize, rows: usize, data_dim: usize) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = CovariateSchema::longitudinal();
    let mut vals = Vec::new();
    for id in 0..instances {
        let sex = (id % 2) as f64;
        let diseased = id % 2 == 0;
        for t in 0..rows {
            let age = t as f64 + rng.random_range(0.0..0.3);
            vals.extend([
                Some(id as f64),
                Some(age),
                Some(sex),
                Some(if diseased { 1.0 } else { 0.0 }),
                diseased.then_some(age - 1.5),
                Some(0.0),
            ]);
        }
    }
    let x = CovariateMatrix::new(schema, Points::new(6, vals).unwrap()).unwrap();
    let entries = (0..instances * rows * data_dim)
        .map(|k| (k % 5 != 3).then(|| rng.random_range(-1.5..1.5)))
        .collect();
    let y = ObservationSet::from_rows(data_dim, entries).unwrap();
    TrainData::new(y, x).unwrap()
}

pub fn toy_arch(data_dim: usize, latent: usize) -> Architecture {
    Architecture {
        data_dim,
        latent_dim: latent,
        encoder_hidden: vec![5],
        decoder_hidden: vec![4],
        activation: Activation::Tanh,
    }
}

/// A model with randomized kernel parameters and `m` inducing rows.
pub fn toy_model(data: &TrainData, latent: usize, m: usize, seed: u64) -> Model {
    let schema = data.x.schema().clone();
    let specs = parse_prior_spec(TOY_PRIOR, &schema).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
    let dims = (0..latent)
        .map(|_| {
            specs
                .iter()
                .map(|s| {
                    let ls = s.se_column().map(|_| rng.random_range(0.8..2.0));
                    KernelTerm::new(s.clone(), rng.random_range(0.4..1.5), ls).unwrap()
                })
                .collect()
        })
        .collect();
    let prior = AdditivePrior::from_terms(dims, &schema).unwrap();
    let mut model = Model::new(toy_arch(data.y.dim(), latent), schema, prior, seed).unwrap();
    model.init_inducing(&data.x, m, seed).unwrap();
    model
}

/// `½ tr((Σ̂⁻¹ − Σ̄⁻¹) W)` by dense assembly.
pub fn optimum_gap(dim: DimPrior<'_>, x: &CovariateMatrix, s: Rows<'_>, w: &DVector<f64>) -> f64 {
    let n = x.len();
    let kxs = dim.a_kernel(x.view(), s).unwrap();
    let mut kss = dim.a_kernel(s, s).unwrap();
    let kf = Factor::new_in_place(&mut kss, "kss").unwrap();
    let mut sigma_hat = DMatrix::zeros(n, n);
    for (p, b) in x.blocks().iter().enumerate() {
        let blk = dim.instance_block(x.block_view(p)).unwrap();
        sigma_hat.view_mut((b.start, b.start), (b.len, b.len)).copy_from(&blk);
    }
    let sigma_bar = &kxs * kf.solve(&kxs.transpose()) + &sigma_hat;
    let w = DMatrix::from_diagonal(w);
    let a = Factor::new(&sigma_hat, "hat").unwrap().solve(&w).trace();
    let b = Factor::new(&sigma_bar, "bar").unwrap().solve(&w).trace();
    0.5 * (a - b)
}

pub fn rel_ok(a: f64, f: f64) -> bool {
    (a - f).abs() <= 1e-4 * a.abs().max(f.abs()) || (a - f).abs() <= 1e-8
}
