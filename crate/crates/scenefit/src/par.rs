//! Row-level parallel dispatch with a sequential fallback.
//!
//! Per-pixel value computations split by row; each row is produced by a
//! fully sequential closure and rows are reassembled in index order, so the
//! output bytes do not depend on thread count or scheduling.

pub(crate) fn map_rows_seq<T, F>(rows: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..rows).map(f).collect()
}

#[cfg(feature = "parallel")]
pub(crate) fn map_rows<T, F>(rows: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..rows).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_rows<T, F>(rows: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_rows_seq(rows, f)
}
