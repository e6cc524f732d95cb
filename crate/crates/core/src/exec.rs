//! Order-preserving fan-out used by the data-parallel loops (restarts,
//! per-model fits, batch trials).
//!
//! With the `parallel` feature the work runs on the rayon pool when the
//! caller asks for it; otherwise, or when `parallel` is false, it runs
//! sequentially. Results are returned in input order either way, so callers
//! that seed every item independently get identical output in both modes.

/// Maps `f` over `0..n`.
pub fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, passing each element's index.
pub fn map_slice<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    map_range(items.len(), parallel, |i| f(i, &items[i]))
}

/// Whether parallel execution is compiled in.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
