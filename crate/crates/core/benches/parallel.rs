use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowlab::dataguard::{deduplicate, Corpus, GenerationGraph, Image};
use flowlab::evalrank::VariantSpec;
use flowlab::par::Exec;
use flowlab::train::{ToyDataset, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn validation(c: &mut Criterion) {
    let variant: VariantSpec = "rf/lognorm(0.00,1.00)".parse().unwrap();
    let mut config = TrainConfig::new(variant, ToyDataset::GaussMix2D, 1);
    config.val_size = 512;
    let mut trainer = Trainer::<f64>::new(config).unwrap();
    let mut group = c.benchmark_group("stratified_validation");
    for (name, exec) in MODES {
        trainer.exec = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(trainer.validate(false).unwrap())));
    }
    group.finish();
}

fn dedup(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut corpus = Corpus::new(32);
    for i in 0..4000 {
        let v: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
        corpus.push(format!("{i}"), &v).unwrap();
    }
    let mut group = c.benchmark_group("dedup_4000x32");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(deduplicate(&corpus, 16, &[0.5], 1, exec).unwrap()))
        });
    }
    group.finish();
}

fn generation_graph(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Image> = (0..120)
        .map(|_| Image::new(32, 32, 1, (0..1024).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let ids: Vec<String> = (0..images.len()).map(|i| i.to_string()).collect();
    let mut group = c.benchmark_group("generation_graph_120");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(GenerationGraph::build(&ids, &images, 0.15, 4, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, validation, dedup, generation_graph);
criterion_main!(benches);
