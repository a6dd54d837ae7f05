//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setsum_core::regressor::{ArchitectureConfig, RegressorModel};
use setsum_core::Tensor;

pub fn desk_model(extent: usize) -> RegressorModel {
    RegressorModel::build(ArchitectureConfig::desk_scale(extent)).expect("desk-scale model")
}

pub fn random_images(count: usize, extent: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Tensor::from_fn(&[1, extent, extent], |_| rng.random::<f64>()))
        .collect()
}
