//! Data-parallel map helpers.
//!
//! Ensemble members (pullback trajectories, Lyapunov runs) are independent,
//! so the hot loops are plain indexed maps. With the `parallel` feature the
//! maps run on rayon; without it they run sequentially. Results are collected
//! in index order either way, and all randomness is keyed by index, so the
//! output is identical for any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order.
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

/// Sequential reference version of [`map_indexed`], always single-threaded.
///
/// Kept unconditionally so benchmarks can compare the parallel and
/// sequential paths within one build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
