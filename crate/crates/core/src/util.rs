//! Small shared helpers.

use crate::error::{Error, Result};

/// Builds the thread pool used for data-parallel jobs (batched translation,
/// per-volume evaluation). `MTUDA_NUM_WORKERS` caps the worker count;
/// a value of 1 disables parallelism entirely (returns `None`).
pub fn worker_pool() -> Result<Option<rayon::ThreadPool>> {
    let n = match std::env::var("MTUDA_NUM_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::config(format!("MTUDA_NUM_WORKERS: bad value `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    if n <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Error::runtime(format!("thread pool: {e}")))
}
