//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps below run on the rayon pool; without
//! it they run in order on the calling thread. Results are always returned
//! in input order, so any reduction the caller performs over them is
//! independent of the thread count.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Routes every map through the sequential path, even with the `parallel`
/// feature enabled.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Number of worker threads the maps below will use.
pub fn num_threads() -> usize {
    if is_sequential() {
        return 1;
    }
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    1
}

/// Sets the global worker count. Has no effect without the `parallel`
/// feature or once the global pool has been started.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    return rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .is_ok();

    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map_range`] but always sequential; used by benches and tests to
/// compare against the pooled path.
pub fn map_range_sequential<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<usize> = (0..1000).collect();
        let out = map_ordered(&v, |i, x| i * 10 + x);
        assert!(out.iter().enumerate().all(|(i, &y)| y == 11 * i));
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
        assert_eq!(map_range(7, |i| i), map_range_sequential(7, |i| i));
    }
}
