//! Per-thread multiply-accumulate counter.
//!
//! Forward kernels that do MAC-shaped work (matmul, convolutions, the
//! selective scan) report into this counter. Gradient passes do not count.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(macs: u64) {
    MACS.with(|c| c.set(c.get() + macs));
}

/// Total MACs recorded on this thread so far.
pub fn total() -> u64 {
    MACS.with(Cell::get)
}

/// Runs `f` and returns its result with the MACs it recorded.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = total();
    let out = f();
    (out, total() - start)
}
