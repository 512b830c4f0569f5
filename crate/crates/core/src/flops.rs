//! Per-thread operation counters, used to check the analytical cost model
//! against what the attention blocks actually execute.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-adds issued by `matmul` tape operations.
    pub matmul_mul_adds: u128,
    /// Multiply-adds issued by convolutions (including pointwise embeddings).
    pub conv_mul_adds: u128,
    /// Exponentials evaluated by row softmax.
    pub softmax_exps: u128,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = Cell::new(OpCounts::default());
}

pub(crate) fn record(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut counts = c.get();
        f(&mut counts);
        c.set(counts);
    });
}

/// Runs `f` and returns the operations it issued on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let saved = COUNTS.with(|c| c.replace(OpCounts::default()));
    let out = f();
    let counted = COUNTS.with(|c| c.replace(saved));
    (out, counted)
}
