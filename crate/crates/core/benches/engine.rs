//! Parallel vs sequential execution of the SIMEX engine and study runner.
//!
//! With the default `parallel` feature each workload runs on a one-thread
//! rayon pool and on the global pool. Built with `--no-default-features`
//! the engine is sequential throughout and only the baseline is measured.

#[cfg(feature = "parallel")]
use criterion::BenchmarkId;
use criterion::{criterion_group, criterion_main, Criterion};
use modal_simex::estimators::{modal_em, EmOptions, EstimatorOptions};
use modal_simex::simex::{naive_lse, simex_estimate};
use modal_simex::simstudy::{generate_replication, run_scenario, StudySettings};
use modal_simex::{exec, Dataset, Estimator, Method, RegressionModel, RowMatrix, Scenario};

fn replication() -> (Scenario, Dataset) {
    let sc = Scenario::new(200, 0.01, 0.8, 4).unwrap();
    let r = generate_replication(&sc, 0, StudySettings::default().seed);
    (sc, Dataset::new(r.y, RowMatrix::column(r.w)).unwrap())
}

#[cfg(feature = "parallel")]
fn on_pools(c: &mut Criterion, group: &str, work: impl Fn() + Sync) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("threads", 1), |b| b.iter(|| single.install(&work)));
    g.bench_function(BenchmarkId::new("threads", rayon::current_num_threads()), |b| b.iter(&work));
    g.finish();
}

#[cfg(not(feature = "parallel"))]
fn on_pools(c: &mut Criterion, group: &str, work: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(&work));
    g.finish();
}

fn simex_modal(c: &mut Criterion) {
    let (sc, data) = replication();
    let h = sc.bandwidth().unwrap().h();
    let cfg = StudySettings { b: 10, ..StudySettings::default() }.simex_config(sc.sigma_u2).unwrap();
    let model = RegressionModel::Exponential;
    on_pools(c, "simex_estimate/s-modal/B=10", || {
        simex_estimate(&Estimator::Modal { h }, &data, &model, &cfg, 0, &EstimatorOptions::default()).unwrap();
    });
}

fn study(c: &mut Criterion) {
    let (sc, _) = replication();
    let settings = StudySettings { b: 5, ..StudySettings::default() };
    on_pools(c, "run_scenario/4 reps/B=5", || {
        run_scenario(&sc, &[Method::SMean, Method::SModal], &settings, &|_, _| {}).unwrap();
    });
}

fn fan_out(c: &mut Criterion) {
    // The engine's fan-out primitive against its plain-loop fallback.
    let (sc, data) = replication();
    let h = sc.bandwidth().unwrap().h();
    let model = RegressionModel::Exponential;
    let start = naive_lse(&model, &data, &EstimatorOptions::default()).unwrap();
    let fit = |_| modal_em(&model, &data, h, &start, &EmOptions::default()).unwrap().0;
    let mut g = c.benchmark_group("map_indexed/16 modal EM fits");
    g.sample_size(10);
    g.bench_function("map_indexed", |b| b.iter(|| exec::map_indexed(16, fit)));
    g.bench_function("map_indexed_sequential", |b| b.iter(|| exec::map_indexed_sequential(16, fit)));
    g.finish();
}

fn em_acceleration(c: &mut Criterion) {
    let (sc, data) = replication();
    let h = sc.bandwidth().unwrap().h();
    let model = RegressionModel::Exponential;
    let start = naive_lse(&model, &data, &EstimatorOptions::default()).unwrap();
    let mut g = c.benchmark_group("modal_em");
    for accelerate in [false, true] {
        let opts = EmOptions { accelerate, ..EmOptions::default() };
        let name = if accelerate { "accelerated" } else { "plain" };
        g.bench_function(name, |b| b.iter(|| modal_em(&model, &data, h, &start, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, simex_modal, study, fan_out, em_acceleration);
criterion_main!(benches);
