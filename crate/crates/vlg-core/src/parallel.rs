//! Data-parallel map with a sequential fallback.
//!
//! Work is only ever split across *independent* items (samples, queries,
//! sequences), each of which computes on its own tape with its own derived
//! seed, and results are collected in input order. Output is therefore
//! bitwise identical regardless of thread count, and with the `parallel`
//! feature disabled the same API degrades to a plain sequential map.

/// Maps `f` over `items`, fanning out across `threads` OS threads.
///
/// `threads == 1` always runs sequentially; `threads == 0` uses the rayon
/// default (one per logical CPU). Without the `parallel` feature every
/// call runs sequentially.
pub fn par_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if threads != 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool construction");
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = threads;
    items.iter().map(f).collect()
}
