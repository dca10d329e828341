//! Worker pools with scheduling-independent results.
//!
//! Monte-Carlo work items carry their own random stream and are collected in
//! index order before any reduction, so the worker count never changes the
//! numbers.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f` inside a dedicated pool of `workers` threads (0 means rayon's default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::validation(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// `f(0..n)` evaluated in parallel, returned in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Sample mean and standard error of the mean, summed in index order.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
