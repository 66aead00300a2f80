//! Process-wide toggles.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Opt-in switch for the kernels' internal parallelism. Defaults to off so
/// benchmark timings stay stable; results are identical either way because
/// every parallel composition uses a fixed merge order.
pub fn set_parallelism(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallelism_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}
