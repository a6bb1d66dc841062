//! Process-wide counters for degenerate inputs that are repaired rather than
//! rejected (clamped soft indices, skipped label classes).
//!
//! Counters only ever increase; compare before/after values to attribute
//! events to a computation.

use std::sync::atomic::{AtomicU64, Ordering};

static INDEX_CLAMPS: AtomicU64 = AtomicU64::new(0);
static SKIPPED_CLASSES: AtomicU64 = AtomicU64::new(0);

/// Soft indices that fell outside `[1, K]` and were clamped.
pub fn index_clamps() -> u64 {
    INDEX_CLAMPS.load(Ordering::Relaxed)
}

/// Label classes left out of a label-conditional loss for having fewer than
/// two samples in the batch.
pub fn skipped_classes() -> u64 {
    SKIPPED_CLASSES.load(Ordering::Relaxed)
}

pub(crate) fn record_index_clamp() {
    INDEX_CLAMPS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn record_skipped_class() {
    SKIPPED_CLASSES.fetch_add(1, Ordering::Relaxed);
}
