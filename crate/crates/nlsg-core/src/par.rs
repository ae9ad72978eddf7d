//! Data-parallel mapping with a sequential fallback.
//!
//! Batch gradient evaluation, per-image simulation, window-local EM runs and
//! grid enumeration are all embarrassingly parallel over an index range. With
//! the `parallel` feature (default) these run on rayon; without it they run
//! sequentially. Results are always collected in index order and reduced
//! sequentially afterwards, so the output is bit-identical regardless of
//! thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference implementation of [`map_indexed`]; used by the bench
/// suite to compare against the parallel path within one build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Cap the global worker pool. Returns whether the cap took effect; calling
/// it twice, or without the `parallel` feature, leaves the pool unchanged.
pub fn configure_workers(workers: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        false
    }
}

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<'a, T, U, F>(items: &'a [T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&'a T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
