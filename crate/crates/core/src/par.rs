//! Data-parallel mapping helpers. With the `parallel` feature enabled the
//! work runs on the rayon pool; without it the same code runs sequentially.
//! Results are collected in index order either way, so downstream reductions
//! see an identical sequence and outputs are bit-for-bit reproducible.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Sums `f(k)` over `0..n` left to right. The map may run in parallel but
/// the reduction order is fixed.
pub(crate) fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_indexed(n, f).into_iter().sum()
}
