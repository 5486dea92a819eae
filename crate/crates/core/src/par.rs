//! Data-parallel helpers with a sequential fallback.
//!
//! Everything batch-shaped in this crate (per-sample attacks, calibration
//! sweeps, diagnostics) funnels through `map_indexed`, which fans out over
//! rayon when the `parallel` feature is enabled and degrades to a plain loop
//! otherwise. Results are collected in index order, so enabling parallelism
//! never changes outputs. `map_indexed_seq` is always compiled; the benches
//! use it to compare both paths in one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Output order always matches index order.
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
        map_indexed_seq(n, f)
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let a = map_indexed(100, |i| i * i);
        let b = map_indexed_seq(100, |i| i * i);
        assert_eq!(a, b);
    }
}
