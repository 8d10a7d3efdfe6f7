//! Rayon vs sequential execution of the data-parallel hot paths.
//!
//! Both paths produce bit-identical results (each unit of work owns a
//! pre-derived random stream and reductions are ordered), so the comparison
//! is purely about throughput. Run with `cargo bench`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedsim::availability::{estimate_marginals, ParticipationSampler};
use fedsim::data::{generate_regression, SynthRegressionSpec};
use fedsim::engine::{run_fedavg, AggregationRule, RunConfig, StepSize};
use fedsim::optimization::{global_objective, ParamVector, ProjectionSet};
use fedsim::par;
use fedsim::rng::{derive_stream, domain};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_estimate_marginals(c: &mut Criterion) {
    let weights: Vec<f64> = (0..100).map(|i| (-(i as f64) / 10.0).exp()).collect();
    let sampler = ParticipationSampler::fixed_size_weighted(weights, 10).unwrap();
    let mut group = c.benchmark_group("estimate_marginals");
    for (label, force_seq) in modes() {
        group.bench_with_input(
            BenchmarkId::new("n100_m10_20k_draws", label),
            &force_seq,
            |b, &fs| {
                par::set_force_sequential(fs);
                b.iter(|| {
                    let mut rng = derive_stream(0, domain::MARGINAL_EST, 0);
                    estimate_marginals(black_box(&sampler), 20_000, &mut rng).unwrap()
                });
                par::set_force_sequential(false);
            },
        );
    }
    group.finish();
}

fn bench_run_fedavg(c: &mut Criterion) {
    // per-client step work (batch x dim) sits above the parallel grain
    let spec = SynthRegressionSpec {
        n_clients: 100,
        samples_per_client: 64,
        dim: 256,
        noise_std: 0.1,
        heterogeneity: 0.5,
        seed: 0,
    };
    let data = generate_regression(&spec).unwrap();
    let sampler = ParticipationSampler::fixed_size_weighted(
        (0..100).map(|i| (-(i as f64) / 10.0).exp()).collect(),
        10,
    )
    .unwrap();
    let config = RunConfig {
        n_clients: 100,
        local_steps: 5,
        global_rounds: 5,
        step_size: StepSize::Fixed { eta: 0.002 },
        batch_size: 40,
        projection: ProjectionSet::new(10.0).unwrap(),
        project_aggregates: false,
        track_divergence: false,
        seed: 1,
    };
    let p = fedsim::availability::MarginalWeights::uniform(100);
    let mut group = c.benchmark_group("run_fedavg");
    group.sample_size(20);
    for (label, force_seq) in modes() {
        group.bench_with_input(
            BenchmarkId::new("n100_t5_h5_d256", label),
            &force_seq,
            |b, &fs| {
                par::set_force_sequential(fs);
                b.iter(|| {
                    run_fedavg(
                        black_box(&config),
                        &sampler,
                        &AggregationRule::Agnostic,
                        &data,
                        &p,
                    )
                    .unwrap()
                });
                par::set_force_sequential(false);
            },
        );
    }
    group.finish();
}

fn bench_global_objective(c: &mut Criterion) {
    let spec = SynthRegressionSpec {
        n_clients: 100,
        samples_per_client: 200,
        dim: 50,
        noise_std: 0.1,
        heterogeneity: 0.5,
        seed: 2,
    };
    let data = generate_regression(&spec).unwrap();
    let p = fedsim::availability::MarginalWeights::uniform(100);
    let theta = ParamVector(vec![0.1; 50]);
    let mut group = c.benchmark_group("global_objective");
    for (label, force_seq) in modes() {
        group.bench_with_input(
            BenchmarkId::new("n100_200x50", label),
            &force_seq,
            |b, &fs| {
                par::set_force_sequential(fs);
                b.iter(|| {
                    global_objective(black_box(&theta), &p, &data.datasets, &data.model).unwrap()
                });
                par::set_force_sequential(false);
            },
        );
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_estimate_marginals,
    bench_run_fedavg,
    bench_global_objective
);
criterion_main!(benches);
