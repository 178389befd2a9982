use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rntn::harness::Architecture;
use rntn_bench::{model, samples};

fn bench_train_step(c: &mut Criterion) {
    let data = samples(64, 784, 10, 1);
    let mut group = c.benchmark_group("train_step");
    for arch in [
        Architecture::RoutingAllFc,
        Architecture::CrossStitch,
        Architecture::SoftMixture,
    ] {
        for k in [2usize, 5, 10] {
            let mut m = model(arch, 784, 64, k);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut i = 0;
            group.bench_with_input(BenchmarkId::new(arch.name(), k), &k, |b, _| {
                b.iter(|| {
                    let s = &data[i % data.len()];
                    i += 1;
                    black_box(
                        m.as_model_mut()
                            .train_batch(&[(i, s)], 0, &mut rng)
                            .unwrap(),
                    );
                });
            });
        }
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let data = samples(64, 784, 10, 2);
    let m = model(Architecture::RoutingAllFc, 784, 64, 10);
    c.bench_function("predict/routing_all_fc/10", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            black_box(m.as_model().predict(&data[i % data.len()]).unwrap())
        });
    });
}

criterion_group!(benches, bench_train_step, bench_predict);
criterion_main!(benches);
