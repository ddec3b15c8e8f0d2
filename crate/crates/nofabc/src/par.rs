//! Data-parallel map over sample slices, with a sequential fallback when
//! the `parallel` feature is disabled.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub fn try_map<S, T, F>(items: &[S], f: F) -> Result<Vec<T>>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map<S, T, F>(items: &[S], f: F) -> Result<Vec<T>>
where
    F: Fn(&S) -> Result<T>,
{
    items.iter().map(f).collect()
}

/// Sequential map, always available; the benchmark compares this path
/// against the parallel default.
pub fn try_map_seq<S, T, F>(items: &[S], f: F) -> Result<Vec<T>>
where
    F: Fn(&S) -> Result<T>,
{
    items.iter().map(f).collect()
}
