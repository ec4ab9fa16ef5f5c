mod common;

use common::{toy_data, toy_model};
use lvae::classifier::{
    auroc, auroc_permutation_p, event_times, fit_bins, outcome_probability, with_hypothesis, Classifier,
    ClassifierConfig, EventTimeBins, HypothesisPrior, OutcomeColumns,
};
use lvae::kernels::{parse_prior_spec, AdditivePrior};
use lvae::trainer::{draw_noise, evaluate_elbo, Model, Objective, BoundChoice, TrainData};
use lvae::{CovariateSchema, LvaeError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_times_make_one_bin() {
    let b = fit_bins(&[4.0, 4.0, 4.0], 6).unwrap();
    assert_eq!(b.times, vec![4.0]);
    assert_eq!(b.weights, vec![1.0]);
}

#[test]
fn one_bin_holds_the_mean() {
    let b = fit_bins(&[1.0, 2.0, 6.0], 1).unwrap();
    assert_eq!(b.weights, vec![1.0]);
    assert!((b.times[0] - 3.0).abs() < 1e-15);
}

#[test]
fn weights_are_normalized_counts() {
    let times: Vec<f64> = [1.0, 1.0, 10.0, 10.0, 10.0, 100.0, 100.0, 100.0, 100.0, 100.0].to_vec();
    let b = fit_bins(&times, 3).unwrap();
    assert_eq!(b.counts, vec![2, 3, 5]);
    for (w, e) in b.weights.iter().zip([0.2, 0.3, 0.5]) {
        assert!((w - e).abs() < 1e-15);
    }
    assert_eq!(b.times, vec![1.0, 10.0, 100.0]);
    assert_eq!(b.edges.len(), 4);
    assert!((b.edges[1] - 100f64.powf(1.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn empty_bins_are_dropped() {
    let b = fit_bins(&[1.0, 100.0, -3.0], 5).unwrap();
    assert_eq!(b.len(), 2);
    assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(fit_bins(&[], 3).is_err());
    assert!(fit_bins(&[0.0, -1.0], 3).is_err());
}

proptest! {
    #[test]
    fn bin_weights_sum_to_one(times in proptest::collection::vec(0.01f64..500.0, 1..80), b in 1usize..10) {
        let bins = fit_bins(&times, b).unwrap();
        prop_assert!((bins.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(bins.counts.iter().sum::<usize>(), times.len());
        prop_assert!(bins.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn probability_is_shift_invariant(l0 in -1e3f64..1e3, l1 in -1e3f64..1e3, c in -1e4f64..1e4) {
        let p = outcome_probability(l0, l1).unwrap();
        let q = outcome_probability(l0 + c, l1 + c).unwrap();
        prop_assert!((p - q).abs() < 1e-9);
        prop_assert_eq!(p > 0.5, l1 > l0);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        scores in proptest::collection::vec(-3.0f64..3.0, 2..40),
        labels in proptest::collection::vec(any::<bool>(), 40),
    ) {
        let labels = &labels[..scores.len()];
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let a = auroc(&scores, labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() / (1.0 + s.exp())).collect();
        prop_assert_eq!(a, auroc(&squashed, labels).unwrap());
        // pair-counting oracle
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((a - wins / pairs).abs() < 1e-12);
    }
}

#[test]
fn logistic_closed_form_and_stability() {
    assert_eq!(outcome_probability(2.0, 2.0).unwrap(), 0.5);
    assert!((outcome_probability(0.0, 1.0).unwrap() - 0.7310586).abs() < 1e-7);
    let p = outcome_probability(0.0, -1e4).unwrap();
    assert!(!p.is_nan() && p < 1e-300);
    assert_eq!(outcome_probability(f64::NEG_INFINITY, 0.0).unwrap(), 1.0);
    assert!(outcome_probability(f64::NEG_INFINITY, f64::NEG_INFINITY).is_err());
}

#[test]
fn auroc_reference_cases() {
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(LvaeError::InvalidParameter(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let a = auroc(&scores, &labels).unwrap();
    // standard error of AUROC under the null ≈ sqrt((n+1)/(12 n₊ n₋))
    assert!((a - 0.5).abs() < 4.0 * (n as f64 / (12.0 * 1000.0 * 1000.0)).sqrt() * 1.01);
    assert!(auroc_permutation_p(&scores, &labels, 200, 1).unwrap() > 0.01);
    let separated: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(*l))).collect();
    assert!(auroc_permutation_p(&separated, &labels, 200, 1).unwrap() < 0.01);
}

fn subject(data: &TrainData, instance: usize) -> (lvae::nnet::ObservationSet, lvae::CovariateMatrix) {
    let (x, rows) = data.x.select_instances(&[instance]).unwrap();
    (data.y.select(&rows), x)
}

fn setup() -> (TrainData, Model, OutcomeColumns) {
    let data = toy_data(4, 4, 5, 3);
    let model = toy_model(&data, 2, 4, 2);
    let cols = OutcomeColumns::longitudinal(data.x.schema()).unwrap();
    (data, model, cols)
}

fn bins(times: &[f64], weights: &[f64]) -> EventTimeBins {
    EventTimeBins {
        edges: vec![],
        times: times.to_vec(),
        counts: vec![1; times.len()],
        weights: weights.to_vec(),
    }
}

#[test]
fn training_event_times_are_one_per_diseased_instance() {
    let (data, _, cols) = setup();
    let t = event_times(&data.x, &cols);
    assert_eq!(t.len(), 2);
    assert!(t.iter().all(|v| (v - 1.5).abs() < 1e-12));
}

#[test]
fn hypothesis_elbos_follow_the_weighted_definition() {
    let (data, model, cols) = setup();
    let test = toy_data(9, 2, 5, 3);
    let (y, x) = subject(&test, 0);
    for prior in [HypothesisPrior::Conditioned, HypothesisPrior::Marginal] {
        let cfg = ClassifierConfig { prior, ..ClassifierConfig::default() };
        let two = Classifier::new(&model, &data, cols, bins(&[1.0, 3.0], &[0.5, 0.5]), cfg.clone()).unwrap();
        let e1 = two.conditioned_elbo(&y, &with_hypothesis(&x, &cols, true, Some(1.0)).unwrap()).unwrap();
        let e3 = two.conditioned_elbo(&y, &with_hypothesis(&x, &cols, true, Some(3.0)).unwrap()).unwrap();
        let l1 = two.hypothesis_elbo(&y, &x, true).unwrap();
        assert!((l1 - 0.5 * (e1 + e3)).abs() < 1e-10 * l1.abs());
        if prior == HypothesisPrior::Conditioned {
            assert_ne!(e1, e3);
        } else {
            // a common shift of an SE input leaves the subject's own covariance unchanged
            assert!((e1 - e3).abs() < 1e-10 * e1.abs());
        }

        let one = Classifier::new(&model, &data, cols, bins(&[3.0], &[1.0]), cfg.clone()).unwrap();
        assert!((one.hypothesis_elbo(&y, &x, true).unwrap() - e3).abs() <= 1e-12 * e3.abs());

        let three = Classifier::new(&model, &data, cols, bins(&[0.5, 2.0, 4.0], &[0.2, 0.3, 0.5]), cfg).unwrap();
        let oracle: f64 = [(0.5, 0.2), (2.0, 0.3), (4.0, 0.5)]
            .iter()
            .map(|&(t, w)| w * three.conditioned_elbo(&y, &with_hypothesis(&x, &cols, true, Some(t)).unwrap()).unwrap())
            .sum();
        assert!((three.hypothesis_elbo(&y, &x, true).unwrap() - oracle).abs() < 1e-10 * oracle.abs());

        let healthy = with_hypothesis(&x, &cols, false, None).unwrap();
        assert!((0..healthy.len()).all(|i| healthy.row(i)[3] == Some(0.0) && healthy.row(i)[4].is_none()));
        assert_eq!(three.hypothesis_elbo(&y, &x, false).unwrap(), three.conditioned_elbo(&y, &healthy).unwrap());
    }
}

#[test]
fn marginal_hypothesis_elbo_is_the_training_objective() {
    let (data, model, cols) = setup();
    let test = toy_data(9, 2, 5, 3);
    let (y, x) = subject(&test, 1);
    let cfg = ClassifierConfig { prior: HypothesisPrior::Marginal, mc_samples: 1, seed: 21, ..ClassifierConfig::default() };
    let c = Classifier::new(&model, &data, cols, bins(&[1.0], &[1.0]), cfg).unwrap();
    let xh = with_hypothesis(&x, &cols, true, Some(1.0)).unwrap();
    let noise = draw_noise(&mut ChaCha8Rng::seed_from_u64(21), 2, y.len());
    let reference = evaluate_elbo(&model, &TrainData::new(y.clone(), xh.clone()).unwrap(), Objective::Gp(BoundChoice::Exact), &noise, 4096)
        .unwrap();
    let elbo = c.conditioned_elbo(&y, &xh).unwrap();
    assert!((elbo + reference.loss).abs() < 1e-10 * elbo.abs(), "{elbo} vs {}", -reference.loss);
}

#[test]
fn scoring_a_split_is_reproducible_and_labelled() {
    let (data, model, cols) = setup();
    let test = toy_data(9, 3, 5, 3);
    let c = Classifier::new(&model, &data, cols, fit_bins(&event_times(&data.x, &cols), 6).unwrap(), ClassifierConfig::default())
        .unwrap();
    let a = c.score_split(&test.y, &test.x).unwrap();
    let b = c.score_split(&test.y, &test.x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|s| s.label).collect::<Vec<_>>(), vec![Some(true), Some(false), Some(true)]);
    for s in &a {
        assert!((0.0..=1.0).contains(&s.probability));
        assert_eq!(s.probability, outcome_probability(s.l0, s.l1).unwrap());
    }
}

#[test]
fn prior_without_the_outcome_is_rejected() {
    let (data, _, cols) = setup();
    let schema = CovariateSchema::longitudinal();
    let prior = AdditivePrior::new(parse_prior_spec("ca(id) + se(age)", &schema).unwrap(), 2, &schema, None).unwrap();
    let model = Model::new(common::toy_arch(3, 2), schema, prior, 0).unwrap();
    let r = Classifier::new(&model, &data, cols, bins(&[1.0], &[1.0]), ClassifierConfig::default());
    assert!(matches!(r, Err(LvaeError::Config(_))));
}
