//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the mapped variants run on the
//! rayon pool; without it they degrade to plain iteration. Results are
//! always collected by index, so output bytes never depend on thread
//! count or scheduling. The `_seq` variants are always available for
//! benchmarks and parallel/sequential equality tests.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn map_slice<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential twin of [`map_slice`].
pub fn map_slice_seq<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Map `f` over indices 0..n, preserving order.
pub fn map_indices<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indices`].
pub fn map_indices_seq<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Fallible map over indices; first error wins deterministically
/// (the error for the smallest failing index is returned).
pub fn try_map_indices<R: Send, E: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<R, E> + Sync + Send,
) -> Result<Vec<R>, E> {
    let results = map_indices(n, f);
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let data: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        let f = |x: &f64| x.sin() * x.exp().recip();
        let a = map_slice(&data, f);
        let b = map_slice_seq(&data, f);
        assert_eq!(a, b);
    }

    #[test]
    fn indices_preserve_order() {
        let out = map_indices(100, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }
}
