//! Parallel vs sequential execution of the hot paths. Build without default
//! features to measure the sequential fallback alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use oneflow::exec;
use oneflow::metrics::mmd2_unbiased;
use oneflow::numerics::Rng;
use oneflow::sampler::{sample, Query, SolverConfig};
use oneflow::tasks::Task;
use oneflow::trainer::{TrainConfig, Trainer};

fn modes() -> Vec<(&'static str, bool)> {
    let mut m = vec![("sequential", true)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", false));
    }
    m
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::for_task(Task::TwoMoons, 2000, 0);
    cfg.hidden = 64;
    cfg.blocks = 2;
    cfg.batch_size = 512;
    cfg.val_every = 1000;
    cfg
}

fn training_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_10_steps");
    g.sample_size(10);
    let base = Trainer::new(small_config()).unwrap();
    for (name, seq) in modes() {
        exec::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || Trainer::resume(small_config(), &base.checkpoint()).unwrap(),
                |mut t| t.run(Some(10), |_| {}).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    exec::set_sequential(false);
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("posterior_sample_5000");
    g.sample_size(10);
    let mut trainer = Trainer::new(small_config()).unwrap();
    trainer.run(Some(50), |_| {}).unwrap();
    let ckpt = trainer.checkpoint();
    let query = Query::posterior(2, &[0.0, 0.0], 5000).unwrap();
    for (name, seq) in modes() {
        exec::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample(&ckpt, &query, &SolverConfig::default(), &Rng::new(1)).unwrap())
        });
    }
    exec::set_sequential(false);
    g.finish();
}

fn mmd(c: &mut Criterion) {
    let mut g = c.benchmark_group("mmd_2000x3");
    g.sample_size(10);
    let mut rng = Rng::new(2);
    let a = Array2::from_shape_fn((2000, 3), |_| rng.standard_normal());
    let b = Array2::from_shape_fn((2000, 3), |_| rng.standard_normal());
    for (name, seq) in modes() {
        exec::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| mmd2_unbiased(a.view(), b.view()).unwrap())
        });
    }
    exec::set_sequential(false);
    g.finish();
}

criterion_group!(benches, training_steps, sampling, mmd);
criterion_main!(benches);
