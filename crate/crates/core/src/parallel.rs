//! Order-preserving batch map. With the `parallel` feature the work runs on a
//! rayon pool of the requested size; otherwise, or with one worker, it runs
//! on the calling thread. Output order always matches input order.

/// Environment variable that caps the worker count.
pub const THREADS_ENV: &str = "EXCITE_LENS_THREADS";

/// Requested workers, capped by `EXCITE_LENS_THREADS` when it parses.
pub fn effective_workers(requested: usize) -> usize {
    let requested = requested.max(1);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => requested.min(cap),
        _ => requested,
    }
}

pub fn available_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Maps `f` over `items` sequentially.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `items` using up to `workers` threads.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    if workers <= 1 || items.len() <= 1 {
        return map_sequential(items, f);
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not start a {workers}-thread pool ({e}); running sequentially");
            map_sequential(items, f)
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], _workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}
