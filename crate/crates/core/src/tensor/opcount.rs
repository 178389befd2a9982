//! Thread-local floating-point operation counter.
//!
//! Every tensor kernel adds its multiply/add count here. Counts are exact and
//! deterministic, which is what the cost-scaling checks bind to.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: usize) {
    FLOPS.with(|c| c.set(c.get() + n as u64));
}

pub fn get() -> u64 {
    FLOPS.with(|c| c.get())
}

pub fn reset() {
    FLOPS.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the number of flops it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = get();
    let r = f();
    (r, get() - before)
}
