//! Fixtures shared by the benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rntn::harness::{build_model, Architecture, ExperimentConfig, ExperimentModel};
use rntn::{MtlSample, Tensor};

/// Random binary samples over `tasks` tasks.
pub fn samples(n: usize, dim: usize, tasks: usize, seed: u64) -> Vec<MtlSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| MtlSample {
            x: Tensor::from_fn(&[dim], |_| rng.gen_range(0.0..1.0)),
            t: i % tasks,
            y: rng.gen_range(0..2),
        })
        .collect()
}

/// A model with `k` blocks per layer and `k` tasks.
pub fn model(arch: Architecture, dim: usize, hidden: usize, k: usize) -> ExperimentModel {
    let mut c = ExperimentConfig {
        architecture: arch,
        hidden_dim: hidden,
        blocks_per_layer: k,
        batch_size: 1,
        ..ExperimentConfig::default()
    };
    c.interference.num_tasks = k;
    build_model(&c, dim, 2).expect("valid bench config")
}
