// SPDX-License-Identifier: MIT OR Apache-2.0

//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature these run on rayon; without it they fall back
//! to plain sequential iteration. Outputs are always in input order, so any
//! reduction done afterwards is independent of the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps a fallible `f` over `items`; returns the first error in input order.
pub fn try_par_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    par_map(items, f).into_iter().collect()
}

/// Runs `op` on a pool of `workers` threads (`None` keeps the global pool).
///
/// Without the `parallel` feature this just calls `op`.
pub fn with_workers<R: Send>(workers: Option<usize>, op: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match workers {
            Some(n) if n >= 1 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(op),
                Err(_) => op(),
            },
            _ => op(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        op()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_pool_size() {
        let items: Vec<u64> = (0..1000).collect();
        let one = with_workers(Some(1), || par_map(&items, |x| x * x));
        let many = with_workers(Some(8), || par_map(&items, |x| x * x));
        assert_eq!(one, many);
        assert_eq!(one[999], 999 * 999);
    }

    #[test]
    fn first_error_wins() {
        let items: Vec<i32> = (0..10).collect();
        let r: Result<Vec<i32>, i32> =
            try_par_map(&items, |&x| if x >= 3 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(3));
    }
}
