//! Deterministic parallel map over index ranges.

use rayon::prelude::*;

/// Applies `task` to every index on a pool of `workers` threads and returns
/// the results in index order. `workers <= 1` runs inline.
pub fn par_map<T: Send>(range: std::ops::Range<usize>, workers: usize, task: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if workers <= 1 || range.len() <= 1 {
        return range.map(task).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("failed to start worker threads");
    pool.install(|| range.into_par_iter().map(task).collect())
}
