//! Structural and oracle tests for the quad-directional shift and the block
//! sub-operations.

use vrwkv_core::block::{
    block_forward, channel_mix, q_shift, spatial_aggregate, time_mix, BlockConfig, PatchGrid,
    VrwkvBlockParams,
};
use vrwkv_core::error::Error;
use vrwkv_core::rng;
use vrwkv_core::tensor::{sigmoid, Tensor};
use vrwkv_core::wkv::WkvParams;

fn cfg_for(grid: PatchGrid) -> BlockConfig {
    BlockConfig::new(grid)
}

#[test]
fn zero_shift_is_identity() {
    let mut r = rng::stream(700, 20);
    let x = rng::uniform_tensor(&mut r, vec![6, 8], -1.0, 1.0);
    let out = q_shift(&x, PatchGrid::new(2, 3), 0, 0.25).unwrap();
    assert_eq!(out, x);
}

#[test]
fn single_patch_grid_zeroes_all_shifted_groups() {
    // Every shifted group falls off the boundary of a 1x1 grid.
    let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = q_shift(&x, PatchGrid::new(1, 1), 1, 0.25).unwrap();
    assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn two_by_two_grid_golden_tensor() {
    // d=4 with gamma 1/4: one channel per direction. Activate only patch
    // (0,0): right-shift moves channel 0 to (0,1), left-shift drops channel
    // 1, down-shift moves channel 2 to (1,0), up-shift drops channel 3.
    let mut data = vec![0.0; 4 * 4];
    data[0..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let x = Tensor::new(vec![4, 4], data).unwrap();
    let out = q_shift(&x, PatchGrid::new(2, 2), 1, 0.25).unwrap();
    let expect = [
        0.0, 0.0, 0.0, 0.0, // (0,0)
        1.0, 0.0, 0.0, 0.0, // (0,1): channel 0 arrived from the left
        0.0, 0.0, 3.0, 0.0, // (1,0): channel 2 arrived from above
        0.0, 0.0, 0.0, 0.0, // (1,1)
    ];
    assert_eq!(out.data(), &expect);
}

#[test]
fn channels_not_divisible_by_four_is_config_error() {
    let x = Tensor::zeros(vec![4, 6]);
    assert!(matches!(
        q_shift(&x, PatchGrid::new(2, 2), 1, 0.25),
        Err(Error::Config(_))
    ));
}

#[test]
fn shift_touches_only_neighbors_at_distance_one() {
    // Perturbing one patch changes the shifted output only at that patch
    // (pass-through channels would, but gamma=1/4 has none) and its four
    // neighbors at distance shift_px.
    let grid = PatchGrid::new(4, 5);
    let mut r = rng::stream(701, 20);
    let x = rng::uniform_tensor(&mut r, vec![grid.tokens(), 8], -1.0, 1.0);
    let base = q_shift(&x, grid, 1, 0.25).unwrap();

    let target = 7; // patch (1, 2)
    let mut bumped = x.data().to_vec();
    for c in 0..8 {
        bumped[target * 8 + c] += 0.5;
    }
    let bumped = Tensor::new(vec![grid.tokens(), 8], bumped).unwrap();
    let shifted = q_shift(&bumped, grid, 1, 0.25).unwrap();

    let (ty, tx) = (target / grid.w, target % grid.w);
    for tok in 0..grid.tokens() {
        let (y, x_) = (tok / grid.w, tok % grid.w);
        let neighbor = (y == ty && x_.abs_diff(tx) == 1) || (x_ == tx && y.abs_diff(ty) == 1);
        let changed = (0..8).any(|c| base.data()[tok * 8 + c] != shifted.data()[tok * 8 + c]);
        assert_eq!(
            changed, neighbor,
            "patch ({y},{x_}) changed={changed}, expected neighbor={neighbor}"
        );
    }
}

#[test]
fn time_mix_interpolation_endpoints() {
    let d = 4;
    let grid = PatchGrid::new(2, 2);
    let cfg = cfg_for(grid);
    let mut r = rng::stream(702, 20);
    let mut params = VrwkvBlockParams::init(d, &mut r, false);
    let x_t = rng::uniform_tensor(&mut r, vec![4, d], -1.0, 1.0);
    let x_prev = rng::uniform_tensor(&mut r, vec![4, d], -1.0, 1.0);

    // mu = 1: the blend is exactly the current frame.
    let ones = Tensor::full(vec![d], 1.0).unwrap();
    params.mu_r = ones.clone();
    params.mu_k = ones.clone();
    params.mu_v = ones;
    let (r1, k1, v1) = time_mix(&x_t, &x_prev, &params, &cfg).unwrap();
    let (r2, k2, v2) = time_mix(&x_t, &x_t, &params, &cfg).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(k1, k2);
    assert_eq!(v1, v2);

    // mu = 0: the blend is exactly the previous frame.
    let zeros = Tensor::zeros(vec![d]);
    params.mu_r = zeros.clone();
    params.mu_k = zeros.clone();
    params.mu_v = zeros;
    let (r3, ..) = time_mix(&x_t, &x_prev, &params, &cfg).unwrap();
    let (r4, ..) = time_mix(&x_prev, &x_prev, &params, &cfg).unwrap();
    assert_eq!(r3, r4);
}

#[test]
fn time_mix_of_equal_frames_ignores_mu() {
    let d = 4;
    let cfg = cfg_for(PatchGrid::new(2, 2));
    let mut r = rng::stream(703, 20);
    let params_a = VrwkvBlockParams::init(d, &mut r, false);
    let mut params_b = params_a.clone();
    params_b.mu_r = Tensor::full(vec![d], 0.123).unwrap();
    params_b.mu_k = Tensor::full(vec![d], 0.987).unwrap();
    params_b.mu_v = Tensor::full(vec![d], 0.5).unwrap();
    let x = rng::uniform_tensor(&mut r, vec![4, d], -1.0, 1.0);
    let (ra, ka, va) = time_mix(&x, &x, &params_a, &cfg).unwrap();
    let (rb, kb, vb) = time_mix(&x, &x, &params_b, &cfg).unwrap();
    for (a, b) in [(ra, rb), (ka, kb), (va, vb)] {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn receptance_gate_closes_and_halves() {
    let d = 2;
    let mut r = rng::stream(704, 20);
    let k = rng::uniform_tensor(&mut r, vec![3, d], -1.0, 1.0);
    let v = rng::uniform_tensor(&mut r, vec![3, d], -1.0, 1.0);
    let params = WkvParams::zeros(d);

    // Strongly negative receptance drives the gate to zero.
    let closed = spatial_aggregate(&Tensor::full(vec![3, d], -40.0).unwrap(), &k, &v, &params)
        .unwrap();
    for &x in closed.data() {
        assert!(x.abs() < 1e-12);
    }

    // Zero receptance halves the aggregation output.
    let wkv = vrwkv_core::wkv::bi_wkv_scan(&k, &v, &params).unwrap();
    let half = spatial_aggregate(&Tensor::zeros(vec![3, d]), &k, &v, &params).unwrap();
    for (h, w) in half.data().iter().zip(wkv.data()) {
        assert!((h - 0.5 * w).abs() < 1e-12);
    }
}

#[test]
fn gated_golden_vector_is_half_the_wkv_golden() {
    // Composes the frozen T=3 aggregation vector with a zero receptance.
    let golden = [
        1.9182243651564042,
        2.069785195828934,
        2.2287449884902406,
    ];
    let k = Tensor::new(vec![3, 1], vec![0.1, -0.2, 0.3]).unwrap();
    let v = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let params = WkvParams::new(
        Tensor::new(vec![1], vec![0.5]).unwrap(),
        Tensor::new(vec![1], vec![0.25]).unwrap(),
    )
    .unwrap();
    let out = spatial_aggregate(&Tensor::zeros(vec![3, 1]), &k, &v, &params).unwrap();
    for (o, g) in out.data().iter().zip(&golden) {
        assert!((o - 0.5 * g).abs() < 1e-9);
    }
}

#[test]
fn channel_mix_zeroes_negative_paths_and_stays_nonnegative() {
    let d = 4;
    let cfg = cfg_for(PatchGrid::new(2, 2));
    let mut r = rng::stream(705, 20);
    let mut params = VrwkvBlockParams::init(d, &mut r, false);
    let o = rng::uniform_tensor(&mut r, vec![4, d], 0.1, 1.0);

    // Force the inner product to be strictly negative: positive blend values
    // and a strongly negative value transform.
    params.w_kc = Tensor::full(vec![d, d], 1.0).unwrap();
    params.w_c = Tensor::full(vec![d, d], -5.0).unwrap();
    params.mu_kc = Tensor::full(vec![d], 1.0).unwrap();
    let cfg_noshift = BlockConfig {
        shift_px: 0,
        ..cfg
    };
    let out = channel_mix(&o, &o, &params, &cfg_noshift).unwrap();
    for &x in out.data() {
        assert_eq!(x, 0.0);
    }

    // In general the squared-ReLU factor keeps the output non-negative.
    let params2 = VrwkvBlockParams::init(d, &mut r, false);
    let o2 = rng::uniform_tensor(&mut r, vec![4, d], -1.0, 1.0);
    let out2 = channel_mix(&o2, &o2, &params2, &cfg).unwrap();
    assert!(out2.data().iter().all(|&x| x >= 0.0));
}

#[test]
fn channel_mix_matches_straight_line_reimplementation() {
    // Independent oracle: the mixing equations written as plain loops.
    let d = 4;
    let tokens = 4;
    let grid = PatchGrid::new(2, 2);
    let cfg = cfg_for(grid);
    let mut r = rng::stream(706, 20);
    let params = VrwkvBlockParams::init(d, &mut r, false);
    let o_t = rng::uniform_tensor(&mut r, vec![tokens, d], -1.0, 1.0);
    let o_prev = rng::uniform_tensor(&mut r, vec![tokens, d], -1.0, 1.0);

    let out = channel_mix(&o_t, &o_prev, &params, &cfg).unwrap();

    // Oracle: blend, shift, project for R_c and K_c; then
    // sigma(R_c) * max(K_c W_c, 0)^2, all with explicit loops.
    let blend = |mu: &Tensor| -> Vec<f64> {
        (0..tokens * d)
            .map(|i| {
                let m = mu.data()[i % d];
                m * o_t.data()[i] + (1.0 - m) * o_prev.data()[i]
            })
            .collect()
    };
    let shift = |x: &[f64]| -> Vec<f64> {
        q_shift(
            &Tensor::new(vec![tokens, d], x.to_vec()).unwrap(),
            grid,
            1,
            0.25,
        )
        .unwrap()
        .data()
        .to_vec()
    };
    let project = |x: &[f64], w: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; tokens * d];
        for t in 0..tokens {
            for j in 0..d {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += x[t * d + p] * w.data()[p * d + j];
                }
                out[t * d + j] = acc;
            }
        }
        out
    };
    let r_c = project(&shift(&blend(&params.mu_rc)), &params.w_rc);
    let k_c = project(&shift(&blend(&params.mu_kc)), &params.w_kc);
    let inner = project(&k_c, &params.w_c);
    let expect: Vec<f64> = r_c
        .iter()
        .zip(&inner)
        .map(|(&rr, &kk)| {
            let act = kk.max(0.0);
            sigmoid(rr) * act * act
        })
        .collect();

    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_projections_make_block_identity() {
    let d = 8;
    let grid = PatchGrid::new(2, 2);
    let cfg = cfg_for(grid);
    let params = VrwkvBlockParams::zeroed(d);
    let mut r = rng::stream(707, 20);
    let x = rng::uniform_tensor(&mut r, vec![3, grid.tokens(), d], -2.0, 2.0);
    let y = block_forward(&x, &params, &cfg).unwrap();
    assert_eq!(y, x, "residual passthrough must be exact");
}

#[test]
fn single_frame_runs_and_stays_finite() {
    let d = 8;
    let grid = PatchGrid::new(2, 2);
    let cfg = cfg_for(grid);
    let mut r = rng::stream(708, 20);
    let params = VrwkvBlockParams::init(d, &mut r, false);
    let x = rng::uniform_tensor(&mut r, vec![1, grid.tokens(), d], -1.0, 1.0);
    let y = block_forward(&x, &params, &cfg).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.all_finite());
}

#[test]
fn block_preserves_shape_across_configs() {
    let d = 8;
    for (h, w, frames, joint) in [(2, 2, 1, false), (2, 4, 3, false), (4, 4, 2, true)] {
        let grid = PatchGrid::new(h, w);
        let cfg = BlockConfig {
            joint_tokens: joint,
            ..cfg_for(grid)
        };
        let mut r = rng::stream(709, 20);
        let params = VrwkvBlockParams::init(d, &mut r, false);
        let x = rng::uniform_tensor(&mut r, vec![frames, grid.tokens(), d], -1.0, 1.0);
        let y = block_forward(&x, &params, &cfg).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn local_init_sets_mix_factors_to_one() {
    let mut r = rng::stream(710, 20);
    let p = VrwkvBlockParams::init(4, &mut r, true);
    assert!(p.mu_r.data().iter().all(|&v| v == 1.0));
    assert!(p.mu_kc.data().iter().all(|&v| v == 1.0));
}
