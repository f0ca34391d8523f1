//! Indexed map that runs on the rayon pool when the `parallel` feature is
//! enabled and sequentially otherwise. Results come back in index order
//! either way, so callers see identical output regardless of worker count.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub(crate) fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    (0..n).map(f).collect()
}
