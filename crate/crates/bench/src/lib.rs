//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use amel_core::config::RunConfig;
use amel_core::data::{make_benchmark, Dataset};
use amel_core::Tensor;

/// Uniform tensor in `[-1, 1]` from a fixed seed.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The default run config with `n` samples per class per domain.
pub fn desk_config(n: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.benchmark.n_live = n;
    c.benchmark.n_spoof = n;
    c.benchmark.target_live = n;
    c.benchmark.target_spoof = n;
    c
}

pub fn desk_dataset(n: usize) -> Dataset {
    make_benchmark(&desk_config(n).benchmark).expect("valid benchmark")
}
