//! Shared inputs for the benchmarks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use tdm_core::rng::{seeded_rng, streams};

/// `n x d` standard normal matrix from a fixed seed.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed, streams::SYNTH);
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

/// Square matrix of uniform entries in `[0, 1)`.
pub fn uniform(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed, streams::SYNTH);
    Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
}
