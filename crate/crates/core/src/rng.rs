//! Seeded, counter-based random streams.
//!
//! All stochastic behavior derives from a single u64 seed plus a purpose
//! stream id, so independent components draw from non-overlapping streams and
//! every run is reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Stream ids, one per consumer of randomness.
pub mod stream_ids {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const BENCH: u64 = 5;
    pub const VERIFY: u64 = 6;
}

/// A ChaCha stream fully determined by (seed, stream id).
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Standard normal draws in row-major order.
pub fn randn_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec_unchecked(shape, data)
}

/// Uniform draws from `[lo, hi)` in row-major order.
pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec_unchecked(shape, data)
}
