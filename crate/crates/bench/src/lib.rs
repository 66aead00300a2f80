//! Shared input builders for the criterion micro-benchmarks.

use rand_chacha::ChaCha8Rng;
use vrwkv_core::rng;
use vrwkv_core::tensor::Tensor;
use vrwkv_core::wkv::WkvParams;

pub fn bench_rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, rng::stream_ids::BENCH)
}

/// Keys, values and parameters for one kernel case.
pub fn wkv_case(t: usize, d: usize, seed: u64) -> (Tensor, Tensor, WkvParams) {
    let mut r = bench_rng(seed);
    let k = rng::uniform_tensor(&mut r, vec![t, d], -1.0, 1.0);
    let v = rng::uniform_tensor(&mut r, vec![t, d], -1.0, 1.0);
    let params = WkvParams::new(
        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
    )
    .expect("params");
    (k, v, params)
}

/// Query/key/value triple for the attention baselines.
pub fn qkv_case(t: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = bench_rng(seed);
    (
        rng::uniform_tensor(&mut r, vec![t, d], -1.0, 1.0),
        rng::uniform_tensor(&mut r, vec![t, d], -1.0, 1.0),
        rng::uniform_tensor(&mut r, vec![t, d], -1.0, 1.0),
    )
}
