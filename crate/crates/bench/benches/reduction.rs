use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sysrisk_bench::{fixture, shape_label, SHAPES};
use sysrisk_core::oracle::direct_primal_solve;
use sysrisk_core::{solve_supconv, systemic_risk, DVector, SolverConfig};

fn reduced_vs_direct(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let mut group = c.benchmark_group("systemic_risk");
    for (n, m, k) in SHAPES {
        let inst = fixture(n, m, k, 7);
        let label = shape_label(n, m, k);
        group.bench_with_input(BenchmarkId::new("reduced", &label), &inst, |b, inst| {
            b.iter(|| {
                systemic_risk(black_box(&inst.scenarios), &inst.utility, &inst.map, &cfg).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("direct", &label), &inst, |b, inst| {
            b.iter(|| {
                direct_primal_solve(black_box(&inst.scenarios), &inst.utility, &inst.map, &cfg)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn supconv_point(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let mut group = c.benchmark_group("supconv");
    for (n, m) in [(2, 1), (4, 1), (4, 2)] {
        let inst = fixture(n, m, 1, 11);
        let y = DVector::from_element(m, 0.5);
        group.bench_function(format!("N{n}_M{m}"), |b| {
            b.iter(|| solve_supconv(&inst.utility, &inst.map, black_box(&y), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, reduced_vs_direct, supconv_point);
criterion_main!(benches);
