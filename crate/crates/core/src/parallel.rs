//! Data-parallel helpers. Results are always merged in input order, so the
//! thread count never changes a numeric output.

use rayon::prelude::*;

/// Caps the worker count for corpus- and dataset-level loops.
pub const THREADS_ENV: &str = "LOCATTN_THREADS";

pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// `items.map(f)` in parallel, collected in order.
pub fn ordered_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    let run = || items.par_iter().map(&f).collect::<Vec<O>>();
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                run()
            }
        },
        None => run(),
    }
}
