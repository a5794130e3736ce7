//! Process-wide fault injection for mutation smoke tests of the verifier.
//!
//! When armed, `softmax_rows` adds the configured offset to the first entry
//! of every row after normalization, breaking row-stochasticity.

use std::sync::atomic::{AtomicU64, Ordering};

static SOFTMAX_OFFSET: AtomicU64 = AtomicU64::new(0);

pub fn arm_softmax_fault(offset: f64) {
    SOFTMAX_OFFSET.store(offset.to_bits(), Ordering::SeqCst);
}

pub fn disarm() {
    SOFTMAX_OFFSET.store(0, Ordering::SeqCst);
}

pub(crate) fn perturb_softmax(data: &mut [f64], cols: usize) {
    let bits = SOFTMAX_OFFSET.load(Ordering::Relaxed);
    if bits == 0 || cols == 0 {
        return;
    }
    let offset = f64::from_bits(bits);
    for row in data.chunks_exact_mut(cols) {
        row[0] += offset;
    }
}
