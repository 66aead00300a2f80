//! Element-counting arena for deterministic peak-memory measurement.
//!
//! Memory is tracked as the number of live 64-bit elements held by tensor
//! buffers, not as OS-level byte statistics. The counts are exact and
//! hardware-independent, which makes high-water marks directly comparable to
//! closed-form element counts.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

static LIVE: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

pub(crate) fn note_alloc(elems: usize) {
    let live = LIVE.fetch_add(elems as u64, Ordering::SeqCst) + elems as u64;
    PEAK.fetch_max(live, Ordering::SeqCst);
}

pub(crate) fn note_free(elems: usize) {
    LIVE.fetch_sub(elems as u64, Ordering::SeqCst);
}

/// Number of 64-bit elements currently alive in counted buffers.
pub fn live_elements() -> u64 {
    LIVE.load(Ordering::SeqCst)
}

/// High-water mark since the process started or the last session reset.
pub fn peak_elements() -> u64 {
    PEAK.load(Ordering::SeqCst)
}

/// Whether a measurement session is currently open.
pub fn is_active() -> bool {
    ACTIVE.load(Ordering::SeqCst)
}

/// Resets the high-water mark to the current live count and returns it.
/// Used for per-measurement baselines inside a session.
pub fn reset_peak() -> u64 {
    let live = LIVE.load(Ordering::SeqCst);
    PEAK.store(live, Ordering::SeqCst);
    live
}

/// Scoped measurement session. Opening a session resets the high-water mark
/// to the current live count; `peak_since_begin` reports how far above the
/// session baseline the live count climbed.
///
/// Sessions do not nest; measurements from concurrent tensor traffic on other
/// threads would be attributed to the open session, so callers serialize.
pub struct ArenaSession {
    baseline: u64,
}

impl ArenaSession {
    pub fn begin() -> Self {
        let baseline = LIVE.load(Ordering::SeqCst);
        PEAK.store(baseline, Ordering::SeqCst);
        ACTIVE.store(true, Ordering::SeqCst);
        ArenaSession { baseline }
    }

    pub fn peak_since_begin(&self) -> u64 {
        PEAK.load(Ordering::SeqCst).saturating_sub(self.baseline)
    }
}

impl Drop for ArenaSession {
    fn drop(&mut self) {
        ACTIVE.store(false, Ordering::SeqCst);
    }
}

/// A heap buffer of f64 values registered with the counting arena for its
/// whole lifetime. All tensor storage and long-lived kernel scratch goes
/// through this type so high-water marks reflect the real working set.
#[derive(Debug)]
pub struct CountedBuf {
    data: Vec<f64>,
}

impl CountedBuf {
    pub fn zeroed(len: usize) -> Self {
        note_alloc(len);
        CountedBuf {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        note_alloc(data.len());
        CountedBuf { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        note_free(self.data.len());
        std::mem::take(&mut self.data)
    }
}

impl Clone for CountedBuf {
    fn clone(&self) -> Self {
        CountedBuf::from_vec(self.data.clone())
    }
}

impl Drop for CountedBuf {
    fn drop(&mut self) {
        note_free(self.data.len());
    }
}

impl PartialEq for CountedBuf {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_tracks_high_water_mark() {
        let session = ArenaSession::begin();
        assert!(is_active());
        let a = CountedBuf::zeroed(100);
        {
            let _b = CountedBuf::zeroed(50);
            assert!(session.peak_since_begin() >= 150);
        }
        drop(a);
        // Peak stays at the high-water mark even after frees.
        assert!(session.peak_since_begin() >= 150);
        drop(session);
        assert!(!is_active());
    }

    #[test]
    fn into_vec_releases_count() {
        let live_before = live_elements();
        let buf = CountedBuf::zeroed(10);
        assert_eq!(live_elements(), live_before + 10);
        let v = buf.into_vec();
        assert_eq!(v.len(), 10);
        assert_eq!(live_elements(), live_before);
    }
}
