//! Data-parallel helpers with a sequential fallback.
//!
//! All reductions happen in input order regardless of worker count, so
//! results are bitwise reproducible whether the `parallel` feature is on,
//! off, or capped to one thread at runtime. `IDR_THREADS=1` forces the
//! sequential path without rebuilding.

use std::sync::atomic::{AtomicUsize, Ordering};

/// 0 means "not capped": use whatever the rayon pool provides.
static THREAD_CAP: AtomicUsize = AtomicUsize::new(0);

/// Caps worker count for subsequent parallel sections. `Some(1)` selects
/// the fully sequential deterministic mode.
pub fn set_threads(n: Option<usize>) {
    THREAD_CAP.store(n.unwrap_or(0), Ordering::Relaxed);
}

/// Reads `IDR_THREADS` and applies it via [`set_threads`].
pub fn set_threads_from_env() {
    match std::env::var("IDR_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => set_threads(Some(n)),
            _ => set_threads(None),
        },
        Err(_) => set_threads(None),
    }
}

pub fn sequential_mode() -> bool {
    !cfg!(feature = "parallel") || THREAD_CAP.load(Ordering::Relaxed) == 1
}

#[cfg(feature = "parallel")]
fn run_parallel<R, F>(n_chunks: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    use rayon::prelude::*;
    let cap = THREAD_CAP.load(Ordering::Relaxed);
    let work = || (0..n_chunks).into_par_iter().map(|i| f(i)).collect();
    if cap == 0 {
        work()
    } else {
        // A scoped pool honors the cap without touching the global pool.
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cap)
            .build()
            .expect("thread pool");
        pool.install(work)
    }
}

/// Maps `f` over chunk indices `0..n_chunks` and returns results in index
/// order. Chunk granularity is the caller's; identical chunking gives
/// identical floating-point results at any thread count.
pub fn map_chunks<R, F>(n_chunks: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    if sequential_mode() || n_chunks <= 1 {
        return (0..n_chunks).map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        run_parallel(n_chunks, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chunks).map(f).collect()
    }
}

/// Splits `len` items into fixed-size chunks (the last may be short).
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk > 0);
    (0..len .div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_chunks_preserves_order() {
        let out = map_chunks(17, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_ranges_cover_everything_once() {
        let rs = chunk_ranges(10, 3);
        assert_eq!(rs, vec![0..3, 3..6, 6..9, 9..10]);
        let rs = chunk_ranges(9, 3);
        assert_eq!(rs.len(), 3);
        assert_eq!(rs.last().unwrap().end, 9);
    }
}
