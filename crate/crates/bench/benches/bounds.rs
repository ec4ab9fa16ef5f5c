use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lvae::kl::verify::sized_instance;
use lvae::kl::{bound_d2_dense, bound_d2_efficient, kl_exact_dim};

const ROWS_PER_INSTANCE: usize = 8;
const INDUCING: usize = 16;

fn d2(c: &mut Criterion) {
    let mut group = c.benchmark_group("d2");
    for n in [128usize, 256, 512, 1024] {
        let inst = sized_instance(1, &vec![ROWS_PER_INSTANCE; n / ROWS_PER_INSTANCE], INDUCING).unwrap();
        let s = inst.s_candidate.view();
        group.bench_with_input(BenchmarkId::new("efficient", n), &inst, |b, i| {
            b.iter(|| bound_d2_efficient(&i.mu, &i.w, &i.prior, 0, &i.x, s).unwrap())
        });
        if n <= 512 {
            group.bench_with_input(BenchmarkId::new("dense", n), &inst, |b, i| {
                b.iter(|| bound_d2_dense(&i.mu, &i.w, &i.prior, 0, &i.x, s).unwrap())
            });
            group.bench_with_input(BenchmarkId::new("exact_kl", n), &inst, |b, i| {
                b.iter(|| kl_exact_dim(&i.mu, &i.w, &i.prior, 0, &i.x).unwrap())
            });
        }
    }
    group.finish();
}

fn gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram");
    for n in [256usize, 1024] {
        let inst = sized_instance(2, &vec![ROWS_PER_INSTANCE; n / ROWS_PER_INSTANCE], INDUCING).unwrap();
        let dim = inst.prior.dim(0);
        group.bench_with_input(BenchmarkId::new("full", n), &inst, |b, i| {
            b.iter(|| dim.kernel(i.x.view(), i.x.view()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("cross_inducing", n), &inst, |b, i| {
            b.iter(|| dim.a_kernel(i.x.view(), i.s_candidate.view()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, d2, gram);
criterion_main!(benches);
