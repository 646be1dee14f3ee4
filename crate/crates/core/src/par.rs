//! Batch-parallel helpers.
//!
//! Every batched computation in the crate goes through these two functions.
//! With the `parallel` feature they fan out over the rayon pool, otherwise
//! they are plain loops. Each row is processed independently, so results are
//! bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(row_index, row)` for every `dim`-sized row of `data`.
pub fn for_each_row<F>(data: &mut [f64], dim: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if dim == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(dim)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(dim)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
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
