//! Instrumented-memory consistency: the measured high-water element count
//! brackets the analytic floor. The upper factor (3x) was frozen from the
//! first instrumented build: scan measures ~2.2x its floor (directional
//! buffers plus gradient buffers), softmax ~1.8x (probability matrix plus
//! the in-place score cotangent).

use std::sync::{Mutex, MutexGuard, OnceLock};

use vrwkv_core::arena::ArenaSession;
use vrwkv_core::bench::{analytic_elements, peak_memory_estimate, Mechanism};

fn lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|p| p.into_inner())
}

#[test]
fn measured_peaks_bracket_analytic_floors() {
    let _guard = lock();
    let session = ArenaSession::begin();
    for mech in [Mechanism::BiWkvScan, Mechanism::SoftmaxFull] {
        let est = peak_memory_estimate(mech, 256, 32, 4, 64, 1).unwrap();
        assert!(
            est.measured >= est.analytic,
            "{mech}: measured {} below floor {}",
            est.measured,
            est.analytic
        );
        assert!(
            est.measured <= 3 * est.analytic,
            "{mech}: measured {} above 3x floor {}",
            est.measured,
            est.analytic
        );
    }
    drop(session);
}

#[test]
fn softmax_floor_carries_the_score_matrix() {
    // At T=64, d=16 the floor includes the 64^2 score matrix.
    let analytic = analytic_elements(Mechanism::SoftmaxFull, 64, 16, 4);
    assert!(analytic >= 4096);
}

#[test]
fn scan_floor_is_linear_in_tokens() {
    // c1 * T * d + c2 * d form: doubling T doubles the T-dependent part and
    // there is no quadratic term.
    let d = 16;
    let f = |t: usize| analytic_elements(Mechanism::BiWkvScan, t, d, 4);
    let (a, b, c) = (f(64), f(128), f(256));
    assert_eq!(b - a, 64 * 4 * d as u64);
    assert_eq!(c - b, 128 * 4 * d as u64);
}

#[test]
fn scan_peak_grows_linearly_and_softmax_quadratically() {
    let _guard = lock();
    let session = ArenaSession::begin();
    let measure = |mech, t| peak_memory_estimate(mech, t, 8, 4, 64, 1).unwrap().measured;
    let scan_small = measure(Mechanism::BiWkvScan, 128);
    let scan_big = measure(Mechanism::BiWkvScan, 512);
    let ratio = scan_big as f64 / scan_small as f64;
    assert!(
        (3.0..5.0).contains(&ratio),
        "scan 4x tokens gave {ratio:.2}x elements"
    );
    let soft_small = measure(Mechanism::SoftmaxFull, 128);
    let soft_big = measure(Mechanism::SoftmaxFull, 512);
    let ratio = soft_big as f64 / soft_small as f64;
    assert!(
        ratio > 10.0,
        "softmax 4x tokens gave only {ratio:.2}x elements"
    );
    drop(session);
}
