//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the indexed map runs on rayon;
//! without it, or when `parallel = false` is requested at runtime, it runs
//! sequentially. Results are collected in index order either way, so outputs
//! and any reduction over them are deterministic regardless of scheduling.

/// Maps `f` over `0..n`, optionally in parallel, returning results in order.
pub fn indexed_map<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
