//! Kernel-level data parallelism.
//!
//! Every parallel kernel partitions its *output* into disjoint chunks and
//! computes each chunk with a fixed internal summation order, so results are
//! bitwise identical whether chunks run on one thread or many.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Caps kernel parallelism. `0` selects sequential mode; any other value
/// sizes the global worker pool (only honoured before the pool first runs).
pub fn configure_threads(threads: usize) {
    if threads == 0 {
        SEQUENTIAL.store(true, Ordering::Relaxed);
    } else {
        SEQUENTIAL.store(false, Ordering::Relaxed);
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// Reads `VIST_THREADS` and applies it, if set and valid.
pub fn configure_from_env() {
    if let Some(n) = std::env::var("VIST_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        configure_threads(n);
    }
}

pub fn is_sequential() -> bool {
    SEQUENTIAL.load(Ordering::Relaxed) || rayon::current_num_threads() <= 1
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    if is_sequential() || data.len() / chunk < 2 {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// `(0..n).map(f)` with results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if is_sequential() || n < 2 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}
