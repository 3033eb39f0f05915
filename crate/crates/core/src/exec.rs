//! Execution strategy for data-parallel loops.
//!
//! Every parallel loop in the crate goes through [`Exec`] so the same code
//! path can be benchmarked sequentially and in parallel. Work is always split
//! into the same units and reduced in index order, so both strategies return
//! bit-identical results.

/// Environment variable that caps the worker count of the global pool.
pub const THREADS_ENV: &str = "PANGRAM_FUSION_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Rayon work stealing. Without the `parallel` feature this runs sequentially.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` with at most `limit` concurrent workers.
    pub fn with_limit<R, F>(self, limit: usize, f: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel && limit > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(limit).build() {
                return pool.install(f);
            }
        }
        let _ = limit;
        f()
    }
}

/// Number of workers the global pool will use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Configures the global pool from [`THREADS_ENV`]. Call once at startup.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
