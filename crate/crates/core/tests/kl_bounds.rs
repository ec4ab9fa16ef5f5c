use lvae::kl::verify::{evaluate, random_instance, sized_instance, spanning_instance, InstanceLimits, RandomInstance};
use lvae::kl::{
    bound_d1, bound_d2_dense, bound_d2_efficient, bound_d2_with_grad, d4_natural_gradient_step, d4_with_grad,
    kl_exact_dim, kl_exact_with_grad, optimal_posterior, svi_d4_full, svi_d4_minibatch, InducingPosterior,
};
use lvae::linalg::{min_eigenvalue, Factor};
use nalgebra::{DMatrix, DVector};

fn limits() -> InstanceLimits {
    InstanceLimits::default()
}

#[test]
fn ordering_chain_on_random_instances() {
    for seed in 0..100 {
        let inst = random_instance(seed, limits()).unwrap();
        let rec = evaluate(&inst).unwrap();
        assert!(rec.n <= 60 && rec.p <= 6 && rec.m <= 10);
        assert!(rec.kl_exact >= 0.0);
        assert!(!rec.violates(1e-8), "seed {seed}: {rec:?}");
    }
}

#[test]
fn d2_collapses_to_exact_when_inducing_rows_are_the_data() {
    for seed in 0..20 {
        let inst = spanning_instance(seed, limits()).unwrap();
        let kl = kl_exact_dim(&inst.mu, &inst.w, &inst.prior, 0, &inst.x).unwrap();
        let d2 = bound_d2_efficient(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, inst.s_candidate.view()).unwrap();
        assert!((d2 - kl).abs() < 1e-6, "seed {seed}: {d2} vs {kl}");
        let d1 = bound_d1(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, inst.s_full.view()).unwrap();
        assert!((d1 - kl).abs() < 1e-6, "seed {seed}: {d1} vs {kl}");
    }
}

#[test]
fn dense_and_efficient_d2_agree() {
    for seed in 0..100 {
        let inst = random_instance(1000 + seed, limits()).unwrap();
        let s = inst.s_candidate.view();
        let a = bound_d2_dense(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s).unwrap();
        let b = bound_d2_efficient(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s).unwrap();
        assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-300), "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn single_instance_degenerates_to_dense() {
    let inst = sized_instance(5, &[14], 6).unwrap();
    let s = inst.s_candidate.view();
    let a = bound_d2_dense(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s).unwrap();
    let b = bound_d2_efficient(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s).unwrap();
    assert!((a - b).abs() <= 1e-8 * a.abs());
}

/// Independent oracle: the structured bound equals the exact KL whenever the
/// candidate part vanishes, regardless of the inducing rows.
#[test]
fn d2_is_exact_without_candidate_terms() {
    let inst = random_instance(77, limits()).unwrap();
    let schema = inst.x.schema().clone();
    let specs = lvae::kernels::parse_prior_spec("ca(id) + ca_x_se(id,age)", &schema).unwrap();
    let prior = lvae::AdditivePrior::new(specs, 1, &schema, Some(&inst.x)).unwrap();
    let kl = kl_exact_dim(&inst.mu, &inst.w, &prior, 0, &inst.x).unwrap();
    let d2 = bound_d2_efficient(&inst.mu, &inst.w, &prior, 0, &inst.x, inst.s_candidate.view()).unwrap();
    assert!((kl - d2).abs() < 1e-10 * kl.abs().max(1.0));
}

#[test]
fn d1_trace_correction_is_nonnegative() {
    for seed in 0..20 {
        let inst = random_instance(300 + seed, limits()).unwrap();
        let prior = &inst.prior;
        let x = &inst.x;
        let dim = prior.dim(0);
        let s = inst.s_full.view();
        let k = dim.kernel(x.view(), x.view()).unwrap();
        let kxs = dim.kernel(x.view(), s).unwrap();
        let kss = dim.kernel(s, s).unwrap();
        let q = &kxs * Factor::new(&kss, "kss").unwrap().solve(&kxs.transpose());
        let tr: f64 = (k - q).diagonal().sum();
        assert!(tr >= -1e-8, "seed {seed}: {tr}");
    }
}

fn uncollapsed_inputs(inst: &RandomInstance, seed: u64) -> InducingPosterior {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = inst.s_candidate.len();
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let h = &a * a.transpose() + DMatrix::identity(m, m) * 0.3;
    let mv = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    InducingPosterior { m: mv, h }
}

#[test]
fn d4_dominates_d2_and_meets_it_at_the_optimum() {
    for seed in 0..30 {
        let inst = random_instance(500 + seed, limits()).unwrap();
        let s = inst.s_candidate.view();
        let d2 = bound_d2_efficient(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s).unwrap();
        let post = uncollapsed_inputs(&inst, seed);
        let d4 = svi_d4_full(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s, &post).unwrap();
        assert!(d4 >= d2 - 1e-8, "seed {seed}: {d4} < {d2}");
        let opt = optimal_posterior(inst.prior.dim(0), &inst.x, s, &inst.mu).unwrap();
        let d4_opt = svi_d4_full(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s, &opt).unwrap();
        let gap = optimum_gap_oracle(&inst);
        assert!((d4_opt - d2 - gap).abs() < 1e-6, "seed {seed}: {d4_opt} vs {d2} + {gap}");
    }
}

#[test]
fn inducing_kl_vanishes_when_posterior_equals_prior() {
    // a zero batch scale drops the per-instance terms, leaving −N/2 plus
    // KL(q(u) ‖ p(u)), which is zero for q(u) = p(u)
    let inst = random_instance(9, limits()).unwrap();
    let s = inst.s_candidate.view();
    let dim = inst.prior.dim(0);
    let kss = dim.a_kernel(s, s).unwrap();
    let post = InducingPosterior::prior_like(&kss);
    let n = inst.x.len();
    let (v, _) = d4_with_grad(dim, &inst.x, s, &inst.mu, &inst.w, &post, 0.0, n).unwrap();
    assert!((v + 0.5 * n as f64).abs() < 1e-9, "{v}");
}

#[test]
fn minibatch_estimates_average_to_the_full_bound() {
    let inst = sized_instance(42, &[3, 5, 4, 2, 6, 3, 4, 5, 2, 3, 4, 4], 8).unwrap();
    let s = inst.s_candidate.view();
    let post = uncollapsed_inputs(&inst, 3);
    let full = svi_d4_full(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s, &post).unwrap();
    for n_batches in [1usize, 2, 3, 4, 12] {
        let per = 12 / n_batches;
        let mut total = 0.0;
        for b in 0..n_batches {
            let blocks: Vec<usize> = (b * per..(b + 1) * per).collect();
            let batch = inst.x.batch(&blocks).unwrap();
            let mu = DVector::from_iterator(batch.rows.len(), batch.rows.iter().map(|&r| inst.mu[r]));
            let w = DVector::from_iterator(batch.rows.len(), batch.rows.iter().map(|&r| inst.w[r]));
            total += svi_d4_minibatch(&mu, &w, &inst.prior, 0, &batch, s, &post).unwrap();
        }
        let mean = total / n_batches as f64;
        assert!((mean - full).abs() <= 1e-10 * full.abs(), "{n_batches} batches: {mean} vs {full}");
    }
}

#[test]
fn natural_gradient_unit_step_reaches_the_optimum() {
    for seed in 0..20 {
        let inst = random_instance(700 + seed, limits()).unwrap();
        let s = inst.s_candidate.view();
        let dim = inst.prior.dim(0);
        let n = inst.x.len();
        let start = InducingPosterior::prior_like(&dim.a_kernel(s, s).unwrap());
        let (_, g) = d4_with_grad(dim, &inst.x, s, &inst.mu, &inst.w, &start, 1.0, n).unwrap();
        let once = d4_natural_gradient_step(&start, &g.m, &g.h, 1.0).unwrap();
        let (d4, g2) = d4_with_grad(dim, &inst.x, s, &inst.mu, &inst.w, &once, 1.0, n).unwrap();
        let twice = d4_natural_gradient_step(&once, &g2.m, &g2.h, 1.0).unwrap();
        let moved = ((&twice.m - &once.m).norm_squared() + (&twice.h - &once.h).norm_squared()).sqrt();
        assert!(moved < 1e-8, "seed {seed}: moved {moved}");
        let d2 = bound_d2_efficient(&inst.mu, &inst.w, &inst.prior, 0, &inst.x, s).unwrap();
        let gap = optimum_gap_oracle(&inst);
        assert!((d4 - d2 - gap).abs() < 1e-6, "seed {seed}: {d4} vs {d2} + {gap}");
        // stationarity: H⁻¹ = K⁻¹ K_SX Σ̂⁻¹ K_XS K⁻¹ + K⁻¹
        let opt = optimal_posterior(dim, &inst.x, s, &inst.mu).unwrap();
        let rel = (&once.h - &opt.h).norm() / opt.h.norm();
        assert!(rel < 1e-8, "seed {seed}: {rel}");
        assert!(min_eigenvalue(&once.h) > 0.0);
        let same = d4_natural_gradient_step(&once, &g2.m, &g2.h, 0.0).unwrap();
        assert_eq!(same, once);
    }
}

/// `½ tr((Σ̂⁻¹ − Σ̄⁻¹) W)` by dense algebra: the uncollapsed bound keeps the
/// encoder-variance trace against the instance part only, so its minimum over
/// the inducing posterior sits this far above the structured bound.
fn optimum_gap_oracle(inst: &RandomInstance) -> f64 {
    let dim = inst.prior.dim(0);
    let x = &inst.x;
    let s = inst.s_candidate.view();
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
    let w = DMatrix::from_diagonal(&inst.w);
    let a = Factor::new(&sigma_hat, "hat").unwrap().solve(&w).trace();
    let b = Factor::new(&sigma_bar, "bar").unwrap().solve(&w).trace();
    0.5 * (a - b)
}

fn rel_ok(a: f64, f: f64) -> bool {
    (a - f).abs() <= 1e-4 * a.abs().max(f.abs()) || (a - f).abs() <= 1e-8
}

#[test]
fn exact_and_structured_gradients_match_finite_differences() {
    let h = 1e-5;
    for seed in 0..5 {
        let inst = random_instance(900 + seed, InstanceLimits {
            max_instances: 3,
            max_rows_per_instance: 5,
            max_inducing: 5,
        })
        .unwrap();
        let x = &inst.x;
        let s = inst.s_candidate.clone();
        let n = x.len();
        let (_, ge) = kl_exact_with_grad(inst.prior.dim(0), x, &inst.mu, &inst.w, None).unwrap();
        let (_, g2) = bound_d2_with_grad(inst.prior.dim(0), x, s.view(), &inst.mu, &inst.w).unwrap();
        let eval = |prior: &lvae::AdditivePrior, mu: &DVector<f64>, w: &DVector<f64>, s: &lvae::Points| {
            (
                kl_exact_dim(mu, w, prior, 0, x).unwrap(),
                bound_d2_efficient(mu, w, prior, 0, x, s.view()).unwrap(),
            )
        };
        for i in 0..n {
            let mut mp = inst.mu.clone();
            mp[i] += h;
            let mut mm = inst.mu.clone();
            mm[i] -= h;
            let (ep, dp) = eval(&inst.prior, &mp, &inst.w, &s);
            let (em, dm) = eval(&inst.prior, &mm, &inst.w, &s);
            assert!(rel_ok(ge.mean[i], (ep - em) / (2.0 * h)));
            assert!(rel_ok(g2.mean[i], (dp - dm) / (2.0 * h)));
            let mut wp = inst.w.clone();
            wp[i] += h;
            let mut wm = inst.w.clone();
            wm[i] -= h;
            let (ep, dp) = eval(&inst.prior, &inst.mu, &wp, &s);
            let (em, dm) = eval(&inst.prior, &inst.mu, &wm, &s);
            assert!(rel_ok(ge.var[i], (ep - em) / (2.0 * h)));
            assert!(rel_ok(g2.var[i], (dp - dm) / (2.0 * h)), "w{i}: {} vs {}", g2.var[i], (dp - dm) / (2.0 * h));
        }
        let base = inst.prior.params(0);
        for k in 0..base.len() {
            let bump = |d: f64| {
                let mut p = inst.prior.clone();
                let mut v = base.clone();
                v[k] += d;
                p.set_params(0, &v).unwrap();
                eval(&p, &inst.mu, &inst.w, &s)
            };
            let (ep, dp) = bump(h);
            let (em, dm) = bump(-h);
            let fe = (ep - em) / (2.0 * h);
            let fd = (dp - dm) / (2.0 * h);
            assert!(rel_ok(ge.params[k], fe), "seed {seed} exact param {k}: {} vs {fe}", ge.params[k]);
            assert!(rel_ok(g2.params[k], fd), "seed {seed} d2 param {k}: {} vs {fd}", g2.params[k]);
        }
        let age = x.schema().index_of("age").unwrap();
        for i in 0..s.len() {
            let bump = |d: f64| {
                let mut sp = s.clone();
                sp.set(i, age, Some(s.get(i, age).unwrap() + d));
                eval(&inst.prior, &inst.mu, &inst.w, &sp).1
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!(rel_ok(g2.inducing[(i, age)], fd), "seed {seed} s{i}: {} vs {fd}", g2.inducing[(i, age)]);
        }
    }
}

#[test]
fn d4_gradients_match_finite_differences() {
    let h = 1e-5;
    let inst = random_instance(1234, InstanceLimits {
        max_instances: 3,
        max_rows_per_instance: 5,
        max_inducing: 4,
    })
    .unwrap();
    let x = &inst.x;
    let s = inst.s_candidate.clone();
    let n = x.len();
    let post = uncollapsed_inputs(&inst, 8);
    let scale = 1.7;
    let f = |prior: &lvae::AdditivePrior, mu: &DVector<f64>, w: &DVector<f64>, s: &lvae::Points, post: &InducingPosterior| {
        d4_with_grad(prior.dim(0), x, s.view(), mu, w, post, scale, n).unwrap().0
    };
    let (_, g) = d4_with_grad(inst.prior.dim(0), x, s.view(), &inst.mu, &inst.w, &post, scale, n).unwrap();
    for i in 0..n {
        let mut a = inst.mu.clone();
        a[i] += h;
        let mut b = inst.mu.clone();
        b[i] -= h;
        let fd = (f(&inst.prior, &a, &inst.w, &s, &post) - f(&inst.prior, &b, &inst.w, &s, &post)) / (2.0 * h);
        assert!(rel_ok(g.dim.mean[i], fd));
        let mut a = inst.w.clone();
        a[i] += h;
        let mut b = inst.w.clone();
        b[i] -= h;
        let fd = (f(&inst.prior, &inst.mu, &a, &s, &post) - f(&inst.prior, &inst.mu, &b, &s, &post)) / (2.0 * h);
        assert!(rel_ok(g.dim.var[i], fd));
    }
    let base = inst.prior.params(0);
    for k in 0..base.len() {
        let bump = |d: f64| {
            let mut p = inst.prior.clone();
            let mut v = base.clone();
            v[k] += d;
            p.set_params(0, &v).unwrap();
            f(&p, &inst.mu, &inst.w, &s, &post)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!(rel_ok(g.dim.params[k], fd), "param {k}: {} vs {fd}", g.dim.params[k]);
    }
    let age = x.schema().index_of("age").unwrap();
    for i in 0..s.len() {
        let bump = |d: f64| {
            let mut sp = s.clone();
            sp.set(i, age, Some(s.get(i, age).unwrap() + d));
            f(&inst.prior, &inst.mu, &inst.w, &sp, &post)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!(rel_ok(g.dim.inducing[(i, age)], fd));
    }
    for i in 0..post.m.len() {
        let mut a = post.clone();
        a.m[i] += h;
        let mut b = post.clone();
        b.m[i] -= h;
        let fd = (f(&inst.prior, &inst.mu, &inst.w, &s, &a) - f(&inst.prior, &inst.mu, &inst.w, &s, &b)) / (2.0 * h);
        assert!(rel_ok(g.m[i], fd));
        for j in 0..post.m.len() {
            // symmetric perturbation of H, compared with the symmetric gradient
            let mut a = post.clone();
            let mut b = post.clone();
            a.h[(i, j)] += h;
            b.h[(i, j)] -= h;
            if i != j {
                a.h[(j, i)] += h;
                b.h[(j, i)] -= h;
            }
            let fd = (f(&inst.prior, &inst.mu, &inst.w, &s, &a) - f(&inst.prior, &inst.mu, &inst.w, &s, &b)) / (2.0 * h);
            let an = if i == j { g.h[(i, i)] } else { 2.0 * g.h[(i, j)] };
            assert!(rel_ok(an, fd), "H[{i},{j}]: {an} vs {fd}");
        }
    }
}
