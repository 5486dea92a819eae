//! Rayon fan-out versus the sequential fallback on the two batch-shaped
//! hot paths: integer inference sweeps and per-sample PGD crafting.
//!
//! `map_indexed` dispatches to rayon only when the `parallel` feature is on
//! (the default); `map_indexed_seq` is always the plain loop, so one binary
//! measures both sides.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use qwb_core::attack::{pgd, PgdConfig};
use qwb_core::model::dataset::{synthetic_shapes, Split};
use qwb_core::model::{build_toy_resnet_seeded, train, TrainConfig};
use qwb_core::oracle::FloatOracle;
use qwb_core::par::{map_indexed, map_indexed_seq};
use qwb_core::quant::{integer_infer, quantize_model};

fn bench_integer_inference(c: &mut Criterion) {
    let model = build_toy_resnet_seeded(&[16, 16, 3], 10, 1).unwrap();
    let data = synthetic_shapes(128, 10, 16, 3, 0.06, 7, Split::Test).unwrap();
    let calib = data.take(16, Split::Calibration);
    let qm = quantize_model(&model, &calib, 8).unwrap();

    let mut group = c.benchmark_group("integer_infer_batch128");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = map_indexed(data.len(), |i| {
                integer_infer(&qm, &data.images[i]).unwrap().0.argmax()
            });
            black_box(out)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = map_indexed_seq(data.len(), |i| {
                integer_infer(&qm, &data.images[i]).unwrap().0.argmax()
            });
            black_box(out)
        })
    });
    group.finish();
}

fn bench_pgd_batch(c: &mut Criterion) {
    let template = build_toy_resnet_seeded(&[16, 16, 3], 10, 1).unwrap();
    let train_set = synthetic_shapes(128, 10, 16, 3, 0.06, 3, Split::Train).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 1, ..TrainConfig::default() };
    let (model, _) = train(&template, &train_set, &cfg).unwrap();
    let data = synthetic_shapes(32, 10, 16, 3, 0.06, 9, Split::Test).unwrap();
    let attack = PgdConfig { eps: 0.02, step: 0.005, max_iter: 5, restarts: 1, seed: 4 };

    let mut group = c.benchmark_group("pgd_batch32");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| {
                let out = map_indexed(data.len(), |i| {
                    let oracle = FloatOracle::new(&model);
                    pgd(&oracle, &data.images[i], data.labels[i], &attack)
                        .unwrap()
                        .success
                });
                black_box(out)
            },
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| {
                let out = map_indexed_seq(data.len(), |i| {
                    let oracle = FloatOracle::new(&model);
                    pgd(&oracle, &data.images[i], data.labels[i], &attack)
                        .unwrap()
                        .success
                });
                black_box(out)
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_integer_inference, bench_pgd_batch);
criterion_main!(benches);
