//! Execution mode switch.
//!
//! Parallel loops only ever split work into independent outputs and reduce
//! partial results in a fixed order, so parallel and sequential execution give
//! bitwise-identical results. Sequential mode additionally keeps everything on
//! the calling thread; `RSA_SEQUENTIAL=1` enables it at startup.

use std::sync::atomic::{AtomicU8, Ordering};

use rayon::prelude::*;

const UNSET: u8 = 0;
const PARALLEL: u8 = 1;
const SEQUENTIAL: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

pub const SEQUENTIAL_ENV: &str = "RSA_SEQUENTIAL";

pub fn is_sequential() -> bool {
    match MODE.load(Ordering::Relaxed) {
        PARALLEL => false,
        SEQUENTIAL => true,
        _ => {
            let sequential = std::env::var(SEQUENTIAL_ENV).is_ok_and(|v| v.trim() == "1");
            MODE.store(
                if sequential { SEQUENTIAL } else { PARALLEL },
                Ordering::Relaxed,
            );
            sequential
        }
    }
}

pub fn set_sequential(sequential: bool) {
    MODE.store(
        if sequential { SEQUENTIAL } else { PARALLEL },
        Ordering::Relaxed,
    );
}

/// Maps `f` over `0..n`, collecting results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if n <= 1 || is_sequential() {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}
