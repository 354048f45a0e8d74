//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) indexed work fans out over the rayon
//! pool. Without it, or after [`set_sequential`], the same closures run on the
//! calling thread. Results always come back in index order, so every reduction
//! built on top of these helpers is independent of the thread count.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Environment variable that caps the worker pool.
pub const THREADS_ENV: &str = "ONEFLOW_THREADS";

/// Force sequential execution even when the `parallel` feature is compiled in.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Evaluate `f(0..n)` and collect in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; the first error by index wins.
pub fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Build the global pool from `ONEFLOW_THREADS` if set. Calling this more than
/// once, or after the pool has started, is a no-op.
pub fn configure_from_env() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("{THREADS_ENV}={raw:?} is not a count")))?;
    if threads == 0 {
        return Err(Error::InvalidParameter(format!("{THREADS_ENV} must be >= 1")));
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

/// Split `len` items into contiguous chunks of at most `chunk` items.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk > 0);
    (0..len.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(len))
        .collect()
}
