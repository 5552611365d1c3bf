//! Data-parallel map helpers.
//!
//! Scene generation, evaluation, and shift sweeps are all embarrassingly
//! parallel over independent items. With the `parallel` feature (default),
//! `workers > 1` dispatches through a dedicated rayon pool; `workers <= 1`
//! always takes the sequential path, which is also the only path when the
//! feature is disabled. Output order matches input order in every mode, so
//! results are identical regardless of worker count.

/// Map `f` over `0..n`, preserving index order.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers > 1 {
        parallel_impl::map_indexed(n, workers, &f)
    } else {
        (0..n).map(f).collect()
    }
}

/// Map `f` over a slice, preserving order.
pub fn map_slice<'a, T, U, F>(items: &'a [T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&'a T) -> U + Sync,
{
    if workers > 1 {
        parallel_impl::map_slice(items, workers, &f)
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(feature = "parallel")]
mod parallel_impl {
    use rayon::prelude::*;

    fn pool(workers: usize) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build worker pool")
    }

    pub fn map_indexed<T, F>(n: usize, workers: usize, f: &F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        pool(workers).install(|| (0..n).into_par_iter().map(f).collect())
    }

    pub fn map_slice<'a, T, U, F>(items: &'a [T], workers: usize, f: &F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&'a T) -> U + Sync,
    {
        pool(workers).install(|| items.par_iter().map(f).collect())
    }
}

#[cfg(not(feature = "parallel"))]
mod parallel_impl {
    pub fn map_indexed<T, F>(n: usize, _workers: usize, f: &F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<'a, T, U, F>(items: &'a [T], _workers: usize, f: &F) -> Vec<U>
    where
        F: Fn(&'a T) -> U,
    {
        items.iter().map(f).collect()
    }
}
