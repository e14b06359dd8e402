//! Data-parallel dispatch.
//!
//! With the `parallel` feature the hot kernels fan out over channels with
//! rayon; without it (or after `set_parallel(false)`) they run the same
//! closures sequentially. Every kernel writes disjoint output chunks with a
//! fixed reduction order, so both paths are bit-identical.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Toggle parallel execution at runtime. No effect without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Run `f(index, chunk)` over consecutive `chunk_len` slices of `out`.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Map `f` over `0..n`, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
