use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rntn::rl::{simplex_projection, wpl_update, WplState, WplVariant};
use rntn::routing::{Step, Trace};
use rntn::{Action, Policy, PolicyKind, RoutingState, TabularPolicy, Tensor};

fn trace(depths: usize) -> Trace {
    Trace {
        steps: (1..=depths)
            .map(|i| Step {
                state: RoutingState {
                    v: Tensor::vector(vec![0.0]),
                    t: 0,
                    i,
                },
                action: Action::block(i - 1, 1),
                action_index: 1,
                agent: 0,
                value: 0.1,
                probs: vec![0.1; 10],
                reward: 0.05,
            })
            .collect(),
        r_final: 1.0,
        prediction: Tensor::vector(vec![1.0, 0.0]),
        dispatch: None,
    }
}

fn bench_wpl(c: &mut Criterion) {
    let tr = trace(3);
    let mut policy = Policy::Tabular(TabularPolicy::new(PolicyKind::Pg, &[10, 10, 10]));
    let mut state = WplState::new(0.05, 1.0, WplVariant::AppendixA4);
    c.bench_function("wpl_update/3x10", |b| {
        b.iter(|| wpl_update(black_box(&tr), &mut policy, &mut state).unwrap());
    });
}

fn bench_projection(c: &mut Criterion) {
    let v: Vec<f64> = (0..10).map(|i| i as f64 * 0.13 - 0.4).collect();
    c.bench_function("simplex_projection/10", |b| {
        b.iter(|| black_box(simplex_projection(black_box(&v))));
    });
}

criterion_group!(benches, bench_wpl, bench_projection);
criterion_main!(benches);
