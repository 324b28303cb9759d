//! Thread-local operation counters.
//!
//! Counters are per thread so concurrently running tests do not observe each
//! other's kernel calls.

use std::cell::Cell;

thread_local! {
    static GROUPED_CONV_CALLS: Cell<u64> = const { Cell::new(0) };
    static CONV_MACS: Cell<u64> = const { Cell::new(0) };
    static GEMM_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the counters on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub grouped_conv_calls: u64,
    /// Multiply-adds performed by convolution forward passes.
    pub conv_macs: u64,
    /// Multiply-adds performed by every dense matrix product, forward and backward.
    pub gemm_macs: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        grouped_conv_calls: GROUPED_CONV_CALLS.with(Cell::get),
        conv_macs: CONV_MACS.with(Cell::get),
        gemm_macs: GEMM_MACS.with(Cell::get),
    }
}

pub fn reset() {
    GROUPED_CONV_CALLS.with(|c| c.set(0));
    CONV_MACS.with(|c| c.set(0));
    GEMM_MACS.with(|c| c.set(0));
}

pub(crate) fn record_grouped_conv() {
    GROUPED_CONV_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_conv_macs(n: u64) {
    CONV_MACS.with(|c| c.set(c.get() + n));
}

pub(crate) fn record_gemm_macs(n: u64) {
    GEMM_MACS.with(|c| c.set(c.get() + n));
}
