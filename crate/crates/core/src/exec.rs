//! Data-parallel map helpers.
//!
//! All fan-out points (MPPI candidate evaluation, per-sample gradient
//! computation, trial batches) go through [`map_indexed`]. With the
//! `parallel` feature enabled the work is distributed via rayon; without it
//! the same closure runs sequentially. Outputs are collected in index order
//! either way, so the two builds produce identical results.
//!
//! [`map_indexed_seq`] is always sequential and serves as the reference path
//! for the criterion benches comparing the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Sequential reference implementation of [`map_indexed`].
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        assert_eq!(map_indexed(100, f), map_indexed_seq(100, f));
    }
}
