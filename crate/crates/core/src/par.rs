//! Index-ordered parallel map with a sequential fallback.
//!
//! With the `parallel` feature the work is spread over a dedicated rayon
//! pool; without it, or with `workers == 1`, items run in order on the
//! calling thread. Results always come back in index order.

/// Default worker count: the machine's available parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Returns `[f(0), f(1), ..., f(n-1)]`.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers > 1 && n > 1 {
            use rayon::prelude::*;
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}

/// True when this build can run work on more than one thread.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
