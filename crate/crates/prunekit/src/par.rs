//! Data-parallel fan-out with a sequential fallback.
//!
//! All hot loops (per-sample gradients, per-layer medians, acquisition
//! candidate scoring, comparison runs) funnel through [`map_indices`]. With
//! the `parallel` feature the map runs on rayon; without it, sequentially.
//! Results are always collected in index order and reductions happen
//! afterwards in a fixed order, so the two paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Sequential twin of [`map_indices`], kept unconditionally for benchmarks
/// comparing the two paths.
pub fn map_indices_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
