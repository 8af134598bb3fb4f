//! Sequential against rayon-parallel execution for the two hot loops:
//! forward simulation and the regression backward induction.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use smp_core::basis::RegressionBasis;
use smp_core::bsde::{solve_bsde_with, BsdeOptions};
use smp_core::models::consumption::{consumption_problem, optimal_law, ConsumptionParams};
use smp_core::{simulate_forward, Execution, SimSpec, TimeGrid};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn forward(c: &mut Criterion) {
    let params = ConsumptionParams::default();
    let problem = consumption_problem(&params).unwrap();
    let law = optimal_law(&params);
    let mut g = c.benchmark_group("simulate_forward");
    g.sample_size(10);
    for paths in [10_000, 50_000] {
        let spec = SimSpec::new(TimeGrid::new(8.0, 200).unwrap(), paths, 1);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, paths), &spec.with_exec(exec), |b, s| {
                b.iter(|| simulate_forward(&problem, &law, s).unwrap())
            });
        }
    }
    g.finish();
}

fn backward(c: &mut Criterion) {
    let params = ConsumptionParams::default();
    let problem = consumption_problem(&params).unwrap();
    let spec = SimSpec::new(TimeGrid::new(8.0, 200).unwrap(), 20_000, 1);
    let ensemble = simulate_forward(&problem, &optimal_law(&params), &spec).unwrap();
    let basis = RegressionBasis::polynomial(4).with_reciprocal(true);
    let mut g = c.benchmark_group("solve_bsde_lsmc");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = BsdeOptions::new(basis.clone()).exec(exec);
        g.bench_function(name, |b| b.iter(|| solve_bsde_with(&problem, &ensemble, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
