//! The verification suite behind the `verify` command: scan/direct
//! equivalence, finite-difference gradient checks, and the structural
//! invariants, each reporting its worst-case error against its tolerance.

use vrwkv_core::attention::aft_attention;
use vrwkv_core::autodiff::Tape;
use vrwkv_core::block::{block_forward, block_forward_var, q_shift, BlockConfig, PatchGrid, VrwkvBlockParams};
use vrwkv_core::dataset::make_synthetic_dataset;
use vrwkv_core::denoiser::{training_step, Denoiser, DenoiserConfig};
use vrwkv_core::diffusion::{
    forward_diffuse, forward_diffuse_step, ConditionEmbedding, NoiseSchedule,
};
use vrwkv_core::fdcheck::{central_diff, max_rel_error, FD_STEP, GRAD_FLOOR, GRAD_RTOL};
use vrwkv_core::rng::{self, stream_ids};
use vrwkv_core::tensor::Tensor;
use vrwkv_core::wkv::{bi_wkv_backward, bi_wkv_direct, bi_wkv_scan, causal_wkv, WkvParams};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub pass: bool,
}

fn report(name: &'static str, worst: f64, tol: f64) -> CheckReport {
    CheckReport {
        name,
        worst,
        tol,
        pass: worst.is_finite() && worst <= tol,
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// The 100-case equivalence grid: T in {4, 16, 64, 256, 512}, d in
/// {1, 8, 32}, entries in [-3, 3], relative error of scan against direct.
fn scan_direct_equivalence(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY);
    let t_sizes = [4usize, 16, 64, 256, 512];
    let d_sizes = [1usize, 8, 32];
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let t_len = t_sizes[case % t_sizes.len()];
        let d = d_sizes[(case / t_sizes.len()) % d_sizes.len()];
        let k = rng::uniform_tensor(&mut r, vec![t_len, d], -3.0, 3.0);
        let v = rng::uniform_tensor(&mut r, vec![t_len, d], -3.0, 3.0);
        let params = WkvParams::new(
            rng::uniform_tensor(&mut r, vec![d], -3.0, 3.0),
            rng::uniform_tensor(&mut r, vec![d], -3.0, 3.0),
        )
        .expect("params");
        let direct = bi_wkv_direct(&k, &v, &params).expect("direct");
        let scan = bi_wkv_scan(&k, &v, &params).expect("scan");
        worst = worst.max(rel_diff(scan.data(), direct.data()));
    }
    report("scan_direct_equivalence", worst, 1e-5)
}

fn gradient_wkv_fd(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 100);
    let (t_len, d) = (8, 4);
    let k = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let v = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let w = rng::uniform_tensor(&mut r, vec![d], -1.5, 1.5);
    let u = rng::uniform_tensor(&mut r, vec![d], -1.5, 1.5);
    let cot = rng::uniform_tensor(&mut r, vec![t_len, d], -1.0, 1.0);
    let params = WkvParams::new(w.clone(), u.clone()).expect("params");
    let grads = bi_wkv_backward(&k, &v, &params, &cot).expect("backward");

    let mut worst: f64 = 0.0;
    let slots: [(&Tensor, &Tensor, usize); 4] =
        [(&k, &grads.k, 0), (&v, &grads.v, 1), (&w, &grads.w, 2), (&u, &grads.u, 3)];
    for (base, analytic, which) in slots {
        let fd = central_diff(
            |p| {
                let mk = |idx: usize, t: &Tensor| {
                    if which == idx {
                        Tensor::new(t.shape().to_vec(), p.to_vec()).unwrap()
                    } else {
                        t.clone()
                    }
                };
                let params = WkvParams::new(mk(2, &w), mk(3, &u)).unwrap();
                bi_wkv_scan(&mk(0, &k), &mk(1, &v), &params)
                    .unwrap()
                    .mul(&cot)
                    .unwrap()
                    .sum()
            },
            base.data(),
            FD_STEP,
        );
        worst = worst.max(max_rel_error(analytic.data(), &fd, GRAD_FLOOR));
    }
    report("gradient_wkv_fd", worst, GRAD_RTOL)
}

fn gradient_block_fd(seed: u64) -> CheckReport {
    let d = 8;
    let frames = 2;
    let grid = PatchGrid::new(4, 4);
    let cfg = BlockConfig::new(grid);
    let mut r = rng::stream(seed, stream_ids::VERIFY + 200);
    let params = VrwkvBlockParams::init(d, &mut r, false);
    let x0 = rng::uniform_tensor(&mut r, vec![frames * grid.tokens(), d], -1.0, 1.0);

    let tape = Tape::new();
    let vars = params.vars(&tape);
    let xv = tape.leaf(x0.clone());
    let loss = block_forward_var(&xv, frames, &vars, &cfg)
        .expect("forward")
        .mean();
    let grads = loss.backward().expect("backward");

    let mut worst: f64 = 0.0;
    for (name, var) in vars.named_vars() {
        let base = var.value();
        let fd = central_diff(
            |p| {
                let mut perturbed = params.clone();
                let t = Tensor::new(base.shape().to_vec(), p.to_vec()).unwrap();
                match name {
                    "w_r" => perturbed.w_r = t,
                    "w_k" => perturbed.w_k = t,
                    "w_v" => perturbed.w_v = t,
                    "mu_r" => perturbed.mu_r = t,
                    "mu_k" => perturbed.mu_k = t,
                    "mu_v" => perturbed.mu_v = t,
                    "wkv_w" => perturbed.wkv.w = t,
                    "wkv_u" => perturbed.wkv.u = t,
                    "w_rc" => perturbed.w_rc = t,
                    "w_kc" => perturbed.w_kc = t,
                    "mu_rc" => perturbed.mu_rc = t,
                    "mu_kc" => perturbed.mu_kc = t,
                    "w_c" => perturbed.w_c = t,
                    _ => unreachable!(),
                }
                let tape = Tape::new();
                let vars = perturbed.vars(&tape);
                let xv = tape.leaf(x0.clone());
                block_forward_var(&xv, frames, &vars, &cfg)
                    .unwrap()
                    .mean()
                    .value()
                    .data()[0]
            },
            base.data(),
            FD_STEP,
        );
        worst = worst.max(max_rel_error(grads.get(var).data(), &fd, GRAD_FLOOR));
    }
    report("gradient_block_fd", worst, GRAD_RTOL)
}

fn gradient_training_fd(seed: u64) -> CheckReport {
    let cfg = DenoiserConfig {
        d: 8,
        blocks: 1,
        patch: 4,
        frames: 2,
        height: 8,
        width: 8,
        ..DenoiserConfig::default()
    };
    let model = Denoiser::init(cfg, &mut rng::stream(seed, stream_ids::VERIFY + 300))
        .expect("init");
    let schedule = NoiseSchedule::linear(100, 1e-4, 2e-2).expect("schedule");
    let clips = make_synthetic_dataset(2, 2, 8, 8, &mut rng::stream(seed, stream_ids::DATASET))
        .expect("dataset");
    let step_rng = rng::stream(seed, stream_ids::VERIFY + 301);

    let run = |m: &Denoiser| {
        let batch: Vec<_> = clips
            .iter()
            .map(|c| {
                (
                    &c.frames,
                    ConditionEmbedding::for_class(c.class_id, m.config.n_classes, m.config.d)
                        .unwrap(),
                )
            })
            .collect();
        training_step(m, &batch, &schedule, 0.3, &mut step_rng.clone()).expect("step")
    };
    let outcome = run(&model);

    let mut worst: f64 = 0.0;
    for target in ["embed_w", "block0.wkv_w", "block0.w_kc", "unembed_w"] {
        let analytic = &outcome
            .grads
            .iter()
            .find(|(n, _)| n == target)
            .expect("grad")
            .1;
        let base = model
            .params
            .named_tensors()
            .into_iter()
            .find(|(n, _)| n == target)
            .map(|(_, t)| t.clone())
            .unwrap();
        let fd = central_diff(
            |p| {
                let mut perturbed = model.clone();
                perturbed
                    .params
                    .update_tensors(|name, cur| {
                        if name == target {
                            Tensor::new(cur.shape().to_vec(), p.to_vec())
                        } else {
                            Ok(cur.clone())
                        }
                    })
                    .unwrap();
                run(&perturbed).loss
            },
            base.data(),
            FD_STEP,
        );
        worst = worst.max(max_rel_error(analytic.data(), &fd, GRAD_FLOOR));
    }
    report("gradient_training_fd", worst, GRAD_RTOL)
}

fn softmax_rows_sum(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 400);
    let x = rng::uniform_tensor(&mut r, vec![16, 24], -20.0, 20.0);
    let s = x.softmax_axis(1).expect("softmax");
    let mut worst: f64 = 0.0;
    for row in s.data().chunks(24) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    report("softmax_rows_sum", worst, 1e-12)
}

fn wkv_convex_bound(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 500);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (t_len, d) = (12, 4);
        let k = rng::uniform_tensor(&mut r, vec![t_len, d], -3.0, 3.0);
        let v = rng::uniform_tensor(&mut r, vec![t_len, d], -3.0, 3.0);
        let params = WkvParams::new(
            rng::uniform_tensor(&mut r, vec![d], -2.0, 2.0),
            rng::uniform_tensor(&mut r, vec![d], -2.0, 2.0),
        )
        .expect("params");
        let out = bi_wkv_scan(&k, &v, &params).expect("scan");
        for c in 0..d {
            let col = |t: &Tensor, i: usize| t.data()[i * d + c];
            let lo = (0..t_len).map(|i| col(&v, i)).fold(f64::INFINITY, f64::min);
            let hi = (0..t_len)
                .map(|i| col(&v, i))
                .fold(f64::NEG_INFINITY, f64::max);
            for t in 0..t_len {
                let y = col(&out, t);
                worst = worst.max((lo - y).max(y - hi).max(0.0));
            }
        }
    }
    report("wkv_convex_bound", worst, 1e-9)
}

fn wkv_shift_invariance(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 600);
    let (t_len, d) = (10, 3);
    let k = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let v = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let params = WkvParams::new(
        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
    )
    .expect("params");
    let base = bi_wkv_scan(&k, &v, &params).expect("scan");
    let shifted = bi_wkv_scan(&k.map(|x| x + 1.37), &v, &params).expect("scan");
    report(
        "wkv_shift_invariance",
        rel_diff(shifted.data(), base.data()),
        1e-10,
    )
}

fn wkv_permutation_w0(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 700);
    let (t_len, d) = (6, 2);
    let k = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let v = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let params = WkvParams::new(
        Tensor::zeros(vec![d]),
        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
    )
    .expect("params");
    let base = bi_wkv_direct(&k, &v, &params).expect("direct");
    let swap = |t: &Tensor| {
        let mut data = t.data().to_vec();
        for c in 0..d {
            data.swap(2 * d + c, 4 * d + c);
        }
        Tensor::new(vec![t_len, d], data).unwrap()
    };
    let swapped = bi_wkv_direct(&swap(&k), &swap(&v), &params).expect("direct");
    // Focus token 0 is untouched by the swap of tokens 2 and 4.
    let worst = (0..d)
        .map(|c| (base.data()[c] - swapped.data()[c]).abs())
        .fold(0.0, f64::max);
    report("wkv_permutation_w0", worst, 1e-12)
}

fn qshift_identity(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 800);
    let grid = PatchGrid::new(3, 4);
    let x = rng::uniform_tensor(&mut r, vec![grid.tokens(), 8], -1.0, 1.0);
    let out = q_shift(&x, grid, 0, 0.25).expect("q_shift");
    let worst = out
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report("qshift_identity", worst, 0.0)
}

fn qshift_locality(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 900);
    let grid = PatchGrid::new(4, 4);
    let x = rng::uniform_tensor(&mut r, vec![grid.tokens(), 8], -1.0, 1.0);
    let base = q_shift(&x, grid, 1, 0.25).expect("q_shift");
    let target = 5usize; // (1, 1)
    let mut bumped = x.data().to_vec();
    for c in 0..8 {
        bumped[target * 8 + c] += 1.0;
    }
    let shifted = q_shift(&Tensor::new(vec![16, 8], bumped).unwrap(), grid, 1, 0.25)
        .expect("q_shift");
    let (ty, tx) = (target / 4, target % 4);
    let mut violations = 0.0;
    for tok in 0..16 {
        let (y, x_) = (tok / 4, tok % 4);
        let neighbor = (y == ty && x_.abs_diff(tx) == 1) || (x_ == tx && y.abs_diff(ty) == 1);
        let changed =
            (0..8).any(|c| base.data()[tok * 8 + c] != shifted.data()[tok * 8 + c]);
        if changed != neighbor {
            violations += 1.0;
        }
    }
    report("qshift_locality", violations, 0.0)
}

fn block_residual_identity(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 1000);
    let d = 8;
    let grid = PatchGrid::new(2, 2);
    let params = VrwkvBlockParams::zeroed(d);
    let x = rng::uniform_tensor(&mut r, vec![3, grid.tokens(), d], -2.0, 2.0);
    let y = block_forward(&x, &params, &BlockConfig::new(grid)).expect("forward");
    let worst = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report("block_residual_identity", worst, 0.0)
}

fn block_shape_preservation(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 1100);
    let mut violations = 0.0;
    for (h, w, frames) in [(2usize, 2usize, 1usize), (2, 4, 3), (4, 4, 2)] {
        let grid = PatchGrid::new(h, w);
        let params = VrwkvBlockParams::init(8, &mut r, false);
        let x = rng::uniform_tensor(&mut r, vec![frames, grid.tokens(), 8], -1.0, 1.0);
        let y = block_forward(&x, &params, &BlockConfig::new(grid)).expect("forward");
        if y.shape() != x.shape() || !y.all_finite() {
            violations += 1.0;
        }
    }
    report("block_shape_preservation", violations, 0.0)
}

fn causal_aft_crosscheck(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 1200);
    let (t_len, d) = (7, 3);
    let w0 = 0.8;
    let k = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let v = rng::uniform_tensor(&mut r, vec![t_len, d], -2.0, 2.0);
    let mut bias = vec![0.0; t_len * t_len];
    for t in 0..t_len {
        for i in 0..=t {
            bias[t * t_len + i] = -((t - i) as f64) * w0;
        }
    }
    let aft = aft_attention(&k, &v, &Tensor::new(vec![t_len, t_len], bias).unwrap())
        .expect("aft");
    let causal = causal_wkv(
        &k,
        &v,
        &Tensor::full(vec![d], w0).unwrap(),
        &Tensor::zeros(vec![d]),
    )
    .expect("causal");
    report(
        "causal_aft_crosscheck",
        rel_diff(aft.data(), causal.data()),
        1e-10,
    )
}

fn matmul_associativity(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, stream_ids::VERIFY + 1300);
    let a = rng::uniform_tensor(&mut r, vec![4, 5], -2.0, 2.0);
    let b = rng::uniform_tensor(&mut r, vec![5, 3], -2.0, 2.0);
    let c = rng::uniform_tensor(&mut r, vec![3, 4], -2.0, 2.0);
    let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
    let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
    let worst = left
        .data()
        .iter()
        .zip(right.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    report("matmul_associativity", worst, 1e-10)
}

fn schedule_monotonic(_seed: u64) -> CheckReport {
    let s = NoiseSchedule::linear(100, 1e-4, 2e-2).expect("schedule");
    let mut violations = 0.0;
    let mut prev = s.alpha_bar(0).unwrap();
    if prev != 1.0 {
        violations += 1.0;
    }
    for t in 1..=100 {
        let cur = s.alpha_bar(t).unwrap();
        if cur > prev {
            violations += 1.0;
        }
        prev = cur;
    }
    report("schedule_monotonic", violations, 0.0)
}

fn diffuse_recursion_consistency(seed: u64) -> CheckReport {
    let s = NoiseSchedule::from_alphas(vec![0.9, 0.8, 0.7]).expect("schedule");
    let mut r = rng::stream(seed, stream_ids::VERIFY + 1400);
    let x0 = rng::uniform_tensor(&mut r, vec![6], -1.0, 1.0);
    let noises: Vec<Tensor> = (0..3).map(|_| rng::randn_tensor(&mut r, vec![6])).collect();
    let mut x = x0.clone();
    for t in 1..=3 {
        x = forward_diffuse_step(&x, t, &noises[t - 1], &s).expect("step");
    }
    let a: Vec<f64> = (1..=3).map(|t| s.alpha(t).unwrap()).collect();
    let coeff = [
        (a[1] * a[2] * (1.0 - a[0])).sqrt(),
        (a[2] * (1.0 - a[1])).sqrt(),
        (1.0 - a[2]).sqrt(),
    ];
    let mut eff = Tensor::zeros(vec![6]);
    for (c, n) in coeff.iter().zip(&noises) {
        eff = eff.add(&n.scale(*c)).unwrap();
    }
    let eff = eff.scale(1.0 / (1.0 - s.alpha_bar(3).unwrap()).sqrt());
    let closed = forward_diffuse(&x0, 3, &eff, &s).expect("closed form");
    let worst = closed
        .data()
        .iter()
        .zip(x.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    report("diffuse_recursion_consistency", worst, 1e-10)
}

type CheckFn = fn(u64) -> CheckReport;

/// Runs every check whose name contains `filter` (empty matches all).
pub fn run_checks(seed: u64, filter: &str) -> Vec<CheckReport> {
    let checks: Vec<(&'static str, CheckFn)> = vec![
        ("scan_direct_equivalence", scan_direct_equivalence),
        ("gradient_wkv_fd", gradient_wkv_fd),
        ("gradient_block_fd", gradient_block_fd),
        ("gradient_training_fd", gradient_training_fd),
        ("softmax_rows_sum", softmax_rows_sum),
        ("wkv_convex_bound", wkv_convex_bound),
        ("wkv_shift_invariance", wkv_shift_invariance),
        ("wkv_permutation_w0", wkv_permutation_w0),
        ("qshift_identity", qshift_identity),
        ("qshift_locality", qshift_locality),
        ("block_residual_identity", block_residual_identity),
        ("block_shape_preservation", block_shape_preservation),
        ("causal_aft_crosscheck", causal_aft_crosscheck),
        ("matmul_associativity", matmul_associativity),
        ("schedule_monotonic", schedule_monotonic),
        ("diffuse_recursion_consistency", diffuse_recursion_consistency),
    ];
    checks
        .into_iter()
        .filter(|(name, _)| filter.is_empty() || name.contains(filter))
        .map(|(_, f)| f(seed))
        .collect()
}
