//! Data-parallel helpers.
//!
//! With the `parallel` feature enabled these fan out over rayon; without it
//! they run sequentially. Results are always returned in index order and
//! reductions are performed by the caller in that order, so outputs do not
//! depend on the worker count.

/// Environment variable bounding the worker count. `0` (the default) means
/// single-threaded deterministic mode.
pub const THREADS_ENV: &str = "TASTAS_THREADS";

/// Worker count requested through [`THREADS_ENV`]; `0` when unset or invalid.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Configures the global pool from [`THREADS_ENV`]. Safe to call more than once.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    {
        let threads = threads_from_env().max(1);
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// Runs `f` with at most `threads` workers (`0` → one worker).
pub fn install<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}
