use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use entangle_core::denoiser::{Denoiser, DenoiserConfig, Trainer, TrainerConfig};
use entangle_core::guidance::run_guided_batch;
use entangle_core::harness::experiment::build_dataset;
use entangle_core::harness::ExperimentConfig;
use entangle_core::softselect::{solve_batch, TransportProblem};
use entangle_core::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sinkhorn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let problems: Vec<TransportProblem> = (0..64)
        .map(|_| {
            let values = (0..256).map(|_| rng.random()).collect();
            TransportProblem::new(values, 77, 0.1).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("sinkhorn_batch_64x256");
    for (name, exec) in STRATEGIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| solve_batch(exec, &problems, 200, 1e-6))
        });
    }
    group.finish();
}

fn guided(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let model = Denoiser::new(DenoiserConfig::reduced(), 3).unwrap();
    let schedule = cfg.schedule.build().unwrap();
    let g = cfg.guidance_for("circle", 0).unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let mut group = c.benchmark_group("guided_batch_4_seeds_8x8");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_guided_batch(exec, &model, &schedule, &g, &seeds).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.size = 64;
    let data = build_dataset(&cfg).unwrap();
    let batch: Vec<_> = data.items.iter().take(16).map(|i| i.training_item()).collect();
    let schedule = cfg.schedule.build().unwrap();
    let mut group = c.benchmark_group("train_step_batch_16");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        let mut model = Denoiser::new(cfg.model.clone(), 0).unwrap();
        let mut trainer = Trainer::new(&model, TrainerConfig::default(), exec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.train_step(&mut model, &batch, &schedule, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sinkhorn, guided, training);
criterion_main!(benches);
