//! Order-preserving map helpers. With the `parallel` feature the work
//! items fan out over rayon; the sequential fallback walks them in place.
//! Both produce identical output vectors, including bit-identical float
//! results, because reductions over the collected vectors always happen
//! in index order at the call sites.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    map_range_seq(n, f)
}

pub(crate) fn map_range_seq<U>(n: usize, f: impl Fn(usize) -> U) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub(crate) fn try_map_range<U: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map_range<U: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub(crate) fn ordered_try_map<T: Send, U: Send>(
    items: Vec<T>,
    f: &(impl Fn(T) -> Result<U> + Sync),
) -> Result<Vec<U>> {
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn ordered_try_map<T: Send, U: Send>(
    items: Vec<T>,
    f: &(impl Fn(T) -> Result<U> + Sync),
) -> Result<Vec<U>> {
    items.into_iter().map(f).collect()
}
