use lvae::kernels::{parse_prior_spec, AdditivePrior, KernelTerm};
use lvae::kl::verify::{random_instance, spanning_instance, InstanceLimits, RandomInstance};
use lvae::kl::{d4_natural_gradient_step, d4_with_grad, optimal_posterior, InducingPosterior, InducingState, VariationalMoments};
use lvae::nnet::{Activation, Architecture, Decoder};
use lvae::predictive::{
    predict_latent, predict_latent_exact, ConditionedDim, predict_latent_sparse, predict_latent_variational, predict_observation,
    LatentPredictive, PredictivePath,
};
use lvae::{CovariateMatrix, CovariateSchema, Points};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const UNSEEN_ID: f64 = 9999.0;

/// Training rows, the same instances half a year later, and two rows of an
/// instance absent from training.
fn queries(inst: &RandomInstance) -> Points {
    let x = &inst.x;
    let age = x.schema().index_of("age").unwrap();
    let onset_col = x.schema().index_of("diseaseAge").unwrap();
    let mut q = x.points().clone();
    for i in 0..x.len() {
        let mut row = x.row(i).to_vec();
        row[age] = row[age].map(|a| a + 0.5);
        row[onset_col] = row[onset_col].map(|a| a + 0.5);
        q.push_row(&row);
    }
    for i in 0..x.len().min(2) {
        let mut row = x.row(i).to_vec();
        row[x.schema().id_index()] = Some(UNSEEN_ID);
        q.push_row(&row);
    }
    q
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn three_point_toy_matches_hand_assembled_dense_computation() {
    let schema = CovariateSchema::longitudinal();
    let specs = parse_prior_spec("se(age)", &schema).unwrap();
    let term = KernelTerm::new(specs[0].clone(), 2.0, Some(1.5)).unwrap();
    let prior = AdditivePrior::from_terms(vec![vec![term]], &schema).unwrap();
    let ages = [0.0, 1.0, 2.5];
    let mut vals = Vec::new();
    for a in ages {
        vals.extend([Some(0.0), Some(a), Some(0.0), Some(0.0), None, Some(0.0)]);
    }
    let x = CovariateMatrix::new(schema.clone(), Points::new(6, vals).unwrap()).unwrap();
    let query = Points::new(6, vec![Some(0.0), Some(1.7), Some(1.0), Some(0.0), None, Some(1.0)]).unwrap();
    let mu = DVector::from_vec(vec![0.4, -1.2, 0.9]);
    let w = DVector::from_vec(vec![0.3, 0.5, 0.2]);

    let k = |a: f64, b: f64| 2.0 * (-(a - b) * (a - b) / (2.0 * 1.5 * 1.5)).exp();
    let sigma = DMatrix::from_fn(3, 3, |i, j| k(ages[i], ages[j]) + if i == j { 1.0 } else { 0.0 });
    let kq = DVector::from_fn(3, |i, _| k(ages[i], 1.7));
    let lu = sigma.lu();
    let a = lu.solve(&kq).unwrap();
    let mean = a.dot(&mu);
    let var = k(1.7, 1.7) - kq.dot(&a) + a.component_mul(&a).dot(&w) + 1.0;

    let got = predict_latent_exact(query.view(), &x, &mu, &w, prior.dim(0)).unwrap();
    assert!((got.mean[0] - mean).abs() < 1e-12, "{} vs {mean}", got.mean[0]);
    assert!((got.var[0] - var).abs() < 1e-12, "{} vs {var}", got.var[0]);
}

#[test]
fn zero_cross_covariance_gives_prior_moments() {
    let inst = random_instance(3, InstanceLimits::default()).unwrap();
    let schema = inst.x.schema().clone();
    let specs = parse_prior_spec("se(age)", &schema).unwrap();
    let term = KernelTerm::new(specs[0].clone(), 1.7, Some(1.0)).unwrap();
    let prior = AdditivePrior::from_terms(vec![vec![term]], &schema).unwrap();
    // no age: the only term is 0 against every training row and against itself
    let query = Points::new(6, vec![Some(0.0), None, Some(1.0), Some(0.0), None, Some(0.0)]).unwrap();
    let got = predict_latent_exact(query.view(), &inst.x, &inst.mu, &inst.w, prior.dim(0)).unwrap();
    assert_eq!(got.mean[0], 0.0);
    assert_eq!(got.var[0], 1.0);
}

#[test]
fn noiseless_encoder_reduces_to_gp_regression() {
    for seed in 0..10 {
        let inst = random_instance(seed, InstanceLimits::default()).unwrap();
        let x = &inst.x;
        let dim = inst.prior.dim(0);
        let w0 = DVector::from_element(x.len(), 1e-12);
        let got = predict_latent_exact(x.view(), x, &inst.mu, &w0, dim).unwrap();

        // textbook GP regression with unit noise, solved by LU
        let k = dim.kernel(x.view(), x.view()).unwrap();
        let kn = &k + DMatrix::identity(x.len(), x.len());
        let lu = kn.lu();
        let mean = &k * lu.solve(&inst.mu).unwrap();
        let cov = &k - &k * lu.solve(&k).unwrap();
        for i in 0..x.len() {
            assert!(close(got.mean[i], mean[i], 1e-9), "seed {seed} row {i}");
            assert!(close(got.var[i], cov[(i, i)] + 1.0, 1e-9), "seed {seed} row {i}");
        }
    }
}

#[test]
fn sparse_agrees_with_exact_for_spanning_inducing_rows() {
    for seed in 0..50 {
        let inst = spanning_instance(seed, InstanceLimits::default()).unwrap();
        let q = queries(&inst);
        let dim = inst.prior.dim(0);
        let exact = predict_latent_exact(q.view(), &inst.x, &inst.mu, &inst.w, dim).unwrap();
        let sparse =
            predict_latent_sparse(q.view(), &inst.x, &inst.mu, &inst.w, dim, inst.s_candidate.view()).unwrap();
        for i in 0..q.len() {
            assert!(
                close(sparse.mean[i], exact.mean[i], 1e-6),
                "seed {seed} query {i}: {} vs {}",
                sparse.mean[i],
                exact.mean[i]
            );
        }
    }
}

fn natural_gradient_fixed_point(inst: &RandomInstance) -> InducingPosterior {
    let dim = inst.prior.dim(0);
    let s = inst.s_candidate.view();
    let kss = dim.a_kernel(s, s).unwrap();
    let start = InducingPosterior::prior_like(&kss);
    let (_, g) = d4_with_grad(dim, &inst.x, s, &inst.mu, &inst.w, &start, 1.0, inst.x.len()).unwrap();
    d4_natural_gradient_step(&start, &g.m, &g.h, 1.0).unwrap()
}

#[test]
fn variational_at_fixed_point_matches_sparse() {
    for seed in 0..50 {
        let inst = random_instance(seed, InstanceLimits::default()).unwrap();
        let q = queries(&inst);
        let dim = inst.prior.dim(0);
        let s = inst.s_candidate.view();
        let post = natural_gradient_fixed_point(&inst);
        let sparse = predict_latent_sparse(q.view(), &inst.x, &inst.mu, &inst.w, dim, s).unwrap();
        let var = predict_latent_variational(q.view(), &inst.x, &inst.mu, dim, s, &post).unwrap();
        for i in 0..q.len() {
            assert!(close(var.mean[i], sparse.mean[i], 1e-6), "seed {seed} query {i}");
            assert!(close(var.var[i], sparse.var[i], 1e-6), "seed {seed} query {i}");
        }
    }
}

#[test]
fn variational_agrees_with_exact_for_spanning_inducing_rows() {
    for seed in 0..50 {
        let inst = spanning_instance(seed, InstanceLimits::default()).unwrap();
        let q = queries(&inst);
        let dim = inst.prior.dim(0);
        let post = natural_gradient_fixed_point(&inst);
        let exact = predict_latent_exact(q.view(), &inst.x, &inst.mu, &inst.w, dim).unwrap();
        let var =
            predict_latent_variational(q.view(), &inst.x, &inst.mu, dim, inst.s_candidate.view(), &post).unwrap();
        for i in 0..q.len() {
            assert!(close(var.mean[i], exact.mean[i], 1e-6), "seed {seed} query {i}");
        }
    }
}

#[test]
fn unseen_instance_gets_no_instance_contribution() {
    let inst = random_instance(11, InstanceLimits::default()).unwrap();
    let dim = inst.prior.dim(0);
    let s = inst.s_candidate.view();
    let mut q = Points::empty(6);
    let mut row = inst.x.row(0).to_vec();
    row[0] = Some(UNSEEN_ID);
    q.push_row(&row);
    row[0] = Some(UNSEEN_ID + 1.0);
    q.push_row(&row);
    row[0] = None;
    q.push_row(&row);
    let sparse = predict_latent_sparse(q.view(), &inst.x, &inst.mu, &inst.w, dim, s).unwrap();
    assert_eq!(sparse.mean[0], sparse.mean[1]);
    assert_eq!(sparse.mean[0], sparse.mean[2]);
    assert_eq!(sparse.var[0], sparse.var[1]);

    let zero = InducingPosterior {
        m: DVector::zeros(s.len()),
        h: DMatrix::identity(s.len(), s.len()),
    };
    let var = predict_latent_variational(q.view(), &inst.x, &inst.mu, dim, s, &zero).unwrap();
    assert_eq!(var.mean[0], 0.0);
}

#[test]
fn known_instance_forecast_uses_its_own_block() {
    let inst = random_instance(5, InstanceLimits { max_instances: 4, max_rows_per_instance: 6, max_inducing: 6 }).unwrap();
    let dim = inst.prior.dim(0);
    let mut q = Points::empty(6);
    let mut row = inst.x.row(0).to_vec();
    q.push_row(&row);
    row[0] = Some(UNSEEN_ID);
    q.push_row(&row);
    let exact = predict_latent_exact(q.view(), &inst.x, &inst.mu, &inst.w, dim).unwrap();
    assert!((exact.mean[0] - exact.mean[1]).abs() > 1e-6);
}

#[test]
fn path_selection_follows_the_cap() {
    let inst = random_instance(2, InstanceLimits::default()).unwrap();
    let q = queries(&inst);
    let moments = VariationalMoments::new(
        DMatrix::from_row_slice(1, inst.x.len(), inst.mu.as_slice()),
        DMatrix::from_row_slice(1, inst.x.len(), inst.w.as_slice()),
    )
    .unwrap();
    let state = InducingState {
        s: inst.s_candidate.clone(),
        posteriors: vec![optimal_posterior(inst.prior.dim(0), &inst.x, inst.s_candidate.view(), &inst.mu).unwrap()],
    };
    let run = |path| predict_latent(q.view(), &inst.x, &moments, &inst.prior, Some(&state), path).unwrap();
    let small_cap = run(PredictivePath::Auto { cap: 0 });
    let big_cap = run(PredictivePath::Auto { cap: 10_000 });
    assert_eq!(small_cap, run(PredictivePath::Sparse));
    assert_eq!(big_cap, run(PredictivePath::Exact));
    assert!(predict_latent(q.view(), &inst.x, &moments, &inst.prior, None, PredictivePath::Sparse).is_err());
}

#[test]
fn permuting_latent_dimensions_permutes_predictions() {
    let a = random_instance(21, InstanceLimits::default()).unwrap();
    let b = {
        // same covariates, different kernel parameters and moments
        let mut other = random_instance(21, InstanceLimits::default()).unwrap();
        let mut p = other.prior.params(0);
        for v in p.iter_mut() {
            *v += 0.3;
        }
        other.prior.set_params(0, &p).unwrap();
        other.mu = other.mu.map(|v| 0.5 - v);
        other
    };
    let schema = a.x.schema().clone();
    let terms = |r: &RandomInstance| r.prior.dim(0).terms.to_vec();
    let ab = AdditivePrior::from_terms(vec![terms(&a), terms(&b)], &schema).unwrap();
    let ba = AdditivePrior::from_terms(vec![terms(&b), terms(&a)], &schema).unwrap();
    let n = a.x.len();
    let stack = |first: &RandomInstance, second: &RandomInstance| {
        VariationalMoments::new(
            DMatrix::from_fn(2, n, |l, i| if l == 0 { first.mu[i] } else { second.mu[i] }),
            DMatrix::from_fn(2, n, |l, i| if l == 0 { first.w[i] } else { second.w[i] }),
        )
        .unwrap()
    };
    let q = queries(&a);
    let p_ab = predict_latent(q.view(), &a.x, &stack(&a, &b), &ab, None, PredictivePath::Exact).unwrap();
    let p_ba = predict_latent(q.view(), &a.x, &stack(&b, &a), &ba, None, PredictivePath::Exact).unwrap();
    assert_eq!(p_ab.mean.row(0), p_ba.mean.row(1));
    assert_eq!(p_ab.mean.row(1), p_ba.mean.row(0));
    assert_eq!(p_ab.var.row(0), p_ba.var.row(1));
}

fn linear_decoder(seed: u64, latent: usize, data: usize) -> Decoder {
    let arch = Architecture {
        data_dim: data,
        latent_dim: latent,
        encoder_hidden: vec![],
        decoder_hidden: vec![],
        activation: Activation::Identity,
    };
    let mut dec = Decoder::new(&arch, &mut ChaCha8Rng::seed_from_u64(seed));
    dec.log_obs_var = DVector::from_fn(data, |i, _| -1.0 + 0.1 * i as f64);
    dec
}

#[test]
fn observation_prediction_is_reproducible() {
    let dec = linear_decoder(1, 2, 3);
    let latent = LatentPredictive {
        mean: DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 1.0, 0.2]),
        var: DMatrix::from_row_slice(2, 2, &[1.1, 1.5, 2.0, 1.0]),
    };
    let a = predict_observation(&dec, &latent, 1, 42).unwrap();
    let b = predict_observation(&dec, &latent, 1, 42).unwrap();
    assert_eq!(a, b);
    assert!(predict_observation(&dec, &latent, 0, 42).is_err());
}

#[test]
fn linear_decoder_pushforward_converges_to_decoded_mean() {
    let dec = linear_decoder(2, 2, 4);
    let latent = LatentPredictive {
        mean: DMatrix::from_row_slice(2, 1, &[0.7, -0.4]),
        var: DMatrix::from_row_slice(2, 1, &[1.3, 2.2]),
    };
    let n = 10_000;
    let out = predict_observation(&dec, &latent, n, 9).unwrap();
    let at_mean = dec.decode(&latent.mean).unwrap().output().clone();
    let weights = &dec.net.layers[0].weights;
    for d in 0..4 {
        let spread: f64 = (0..2).map(|l| weights[(d, l)].powi(2) * latent.var[(l, 0)]).sum();
        let se = (spread / n as f64).sqrt();
        assert!((out.mean[(d, 0)] - at_mean[(d, 0)]).abs() < 3.0 * se, "dim {d}");
        // total variance: decoder noise plus the spread of the linear map
        let expected = dec.obs_var()[d] + spread;
        assert!((out.var[(d, 0)] - expected).abs() < 0.05 * expected, "dim {d}");
    }
}

#[test]
fn degenerate_latent_decodes_the_mean() {
    let dec = linear_decoder(3, 2, 3);
    let latent = LatentPredictive {
        mean: DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 1.0, 0.2]),
        var: DMatrix::zeros(2, 2),
    };
    let out = predict_observation(&dec, &latent, 1, 0).unwrap();
    let at_mean = dec.decode(&latent.mean).unwrap().output().clone();
    assert_eq!(out.mean, at_mean);
    let out = predict_observation(&dec, &latent, 25, 0).unwrap();
    assert!((out.mean - at_mean).amax() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictive_variance_respects_the_noise_floor(seed in 0u64..100_000) {
        let inst = random_instance(seed, InstanceLimits::default()).unwrap();
        let q = queries(&inst);
        let dim = inst.prior.dim(0);
        let s = inst.s_candidate.view();
        let exact = predict_latent_exact(q.view(), &inst.x, &inst.mu, &inst.w, dim).unwrap();
        let sparse = predict_latent_sparse(q.view(), &inst.x, &inst.mu, &inst.w, dim, s).unwrap();
        let post = natural_gradient_fixed_point(&inst);
        let var = predict_latent_variational(q.view(), &inst.x, &inst.mu, dim, s, &post).unwrap();
        for p in [&exact, &sparse, &var] {
            for v in p.var.iter() {
                prop_assert!(v.is_finite() && *v >= 1.0 - 1e-8, "variance {v}");
            }
        }
    }
}

#[test]
fn joint_predictive_matches_the_dense_formula() {
    for seed in 0..20 {
        let inst = random_instance(seed, InstanceLimits::default()).unwrap();
        let q = queries(&inst);
        let dim = inst.prior.dim(0);
        let cond = ConditionedDim::new(dim, &inst.x, &inst.mu, &inst.w, 4096).unwrap();
        let (mean, cov) = cond.joint(q.view()).unwrap();
        let marginal = predict_latent_exact(q.view(), &inst.x, &inst.mu, &inst.w, dim).unwrap();

        let mut sigma = dim.kernel(inst.x.view(), inst.x.view()).unwrap();
        for i in 0..inst.x.len() {
            sigma[(i, i)] += 1.0;
        }
        let inv = sigma.try_inverse().unwrap();
        let k = dim.kernel(inst.x.view(), q.view()).unwrap();
        let w = DMatrix::from_diagonal(&inst.w);
        let dense = dim.kernel(q.view(), q.view()).unwrap() + DMatrix::identity(q.len(), q.len())
            - k.transpose() * &inv * &k
            + k.transpose() * &inv * w * &inv * &k;
        for i in 0..q.len() {
            assert!(close(mean[i], marginal.mean[i], 1e-9), "seed {seed} mean {i}");
            assert!(close(cov[(i, i)], marginal.var[i], 1e-9), "seed {seed} var {i}");
            for j in 0..q.len() {
                assert_eq!(cov[(i, j)], cov[(j, i)]);
                assert!(close(cov[(i, j)], dense[(i, j)], 1e-7), "seed {seed} ({i}, {j})");
            }
        }
    }
}
