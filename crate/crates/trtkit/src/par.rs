//! Data-parallel helpers with a sequential fallback.
//!
//! Heavy kernels write disjoint chunks of their output buffer, so the
//! result is bitwise identical whether the `parallel` feature is enabled
//! or not, and for any thread count. A runtime switch forces sequential
//! execution even when the feature is compiled in (`--deterministic`
//! keeps it for symmetry with the CLI contract; outputs match either way).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution at runtime (used by `--deterministic`).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
pub fn parallel_active() -> bool {
    !sequential_forced()
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_active() -> bool {
    false
}

/// Apply `f` to each fixed-size chunk of `out`. `f` receives the chunk
/// index and the chunk slice; chunks are disjoint so the schedule cannot
/// change the result.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
