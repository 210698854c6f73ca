use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedsim_core::aggregation::{aggregate, LocalUpdate, StrategyConfig, StrategyKind};
use fedsim_core::data::{generate_synthetic, partition, sample_batch, SyntheticSpec};
use fedsim_core::model::{gradient, init_params, local_train, LocalTrainSpec};
use fedsim_core::{run_experiment, Dataset, ModelArch, ParamVector, PartitionScheme, RunConfig, VersionHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset() -> Dataset {
    generate_synthetic(SyntheticSpec { classes: 10, dim: 16, per_class: 300, spread: 0.35 }, 1).unwrap()
}

fn model_kernels(c: &mut Criterion) {
    let data = dataset();
    let arch = ModelArch::new(vec![16, 32, 10]).unwrap();
    let params = init_params(&arch, 2);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_batch(&data, &indices, 32, &mut rng).unwrap();

    c.bench_function("gradient/16-32-10/batch32", |b| {
        b.iter(|| gradient(black_box(&params), &arch, black_box(&batch)).unwrap())
    });
    let spec = LocalTrainSpec { steps: 10, lr: 0.05, batch_size: 32 };
    c.bench_function("local_train/10x32", |b| {
        b.iter(|| local_train(black_box(&params), &arch, &data, &indices, spec, 7).unwrap())
    });
}

fn aggregation_kernels(c: &mut Criterion) {
    let dim = 16 * 32 + 32 + 32 * 10 + 10;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut vector = || ParamVector::from((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    let mut history = VersionHistory::new(vector());
    for _ in 0..20 {
        history.push(vector());
    }
    let t = history.current_version();
    let updates: Vec<LocalUpdate> = (0..10)
        .map(|i| LocalUpdate {
            client_id: i,
            delta: vector(),
            base_version: t - (i as u64 % 6),
            batch_loss_mean: 0.5 + i as f64 * 0.1,
            dataset_size: 1500,
            upload_time: i as f64,
        })
        .collect();
    let x = history.current().clone();
    for kind in StrategyKind::ALL {
        if kind == StrategyKind::FedavgSync {
            continue;
        }
        let cfg = StrategyConfig::new(kind);
        c.bench_function(&format!("aggregate/{kind}/K10"), |b| {
            b.iter(|| aggregate(&cfg, black_box(&x), t, black_box(&updates), &history).unwrap())
        });
    }
}

fn partition_kernel(c: &mut Criterion) {
    let data = dataset();
    c.bench_function("partition/dirichlet/30", |b| {
        b.iter(|| partition(black_box(&data), 30, PartitionScheme::Dirichlet { alpha: 0.5 }, 5).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let cfg = RunConfig::parse(
        r#"
clients = 30
buffer_size = 10
max_rounds = 20
eval_every = 5
[strategy]
kind = "contribution_aware"
[dataset]
kind = "synthetic"
per_class = 600
test_per_class = 100
"#,
    )
    .unwrap();
    let mut group = c.benchmark_group("simulation");
    group.sample_size(10);
    group.bench_function("30 clients/20 rounds", |b| {
        b.iter_batched(|| cfg.clone(), |cfg| run_experiment(&cfg).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, model_kernels, aggregation_kernels, partition_kernel, simulation);
criterion_main!(benches);
