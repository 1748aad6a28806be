//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature and `workers > 1` the closure runs on the
//! current rayon pool; otherwise it runs in order on the calling thread.
//! Output order always matches input order, and callers reduce the results
//! sequentially, so both paths give bit-identical answers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        return items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
    }
    let _ = workers;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Sets the global rayon pool size. Later calls are ignored.
pub fn init_workers(workers: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}
