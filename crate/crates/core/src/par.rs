//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these run on rayon's global pool.
//! Without it they fall back to plain iteration. Results always come back in
//! index order, so reductions performed by callers are deterministic either way.

/// Whether the rayon backend is compiled in.
#[inline]
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Map `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    sequential::map_indexed(n, f)
}

/// Map `f` over a slice, returning results in slice order.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    sequential::map_slice(items, f)
}

/// Run `op` with at most `jobs` worker threads.
///
/// `jobs == 0` means "use the default pool". Without the `parallel` feature
/// this simply calls `op`.
#[cfg(feature = "parallel")]
pub fn with_jobs<R, F>(jobs: usize, op: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    if jobs == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(op),
        Err(err) => {
            log::warn!("could not build a {jobs}-thread pool ({err}); using the global pool");
            op()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R, F>(_jobs: usize, op: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    op()
}

/// Always-sequential versions of the helpers above. Used as the fallback
/// backend and by the benchmarks as the baseline.
pub mod sequential {
    pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
    where
        F: Fn(usize) -> U,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        F: Fn(&T) -> U,
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let out = map_indexed(1000, |i| i * 3);
        assert_eq!(out, sequential::map_indexed(1000, |i| i * 3));
        let items: Vec<u64> = (0..257).collect();
        assert_eq!(map_slice(&items, |x| x + 1), sequential::map_slice(&items, |x| x + 1));
    }

    #[test]
    fn with_jobs_runs_closure() {
        assert_eq!(with_jobs(2, || map_indexed(10, |i| i).iter().sum::<usize>()), 45);
        assert_eq!(with_jobs(0, || 7), 7);
    }
}
