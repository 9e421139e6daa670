//! Batch execution of independent jobs (runs, sweep cells).
//!
//! Individual runs are strictly sequential so they stay bit-reproducible;
//! throughput comes from running *jobs* side by side. The parallel path is
//! behind the `parallel` feature and must return exactly what the
//! sequential path returns — same values, same order — because every job
//! owns its RNG streams and shares nothing. The bench suite compares the
//! two paths on identical job lists.

use crate::error::{Error, Result};

/// Run every job in order on the current thread. Always compiled; this is
/// the reference the parallel path is measured against.
pub fn run_jobs_seq<J, R, F>(jobs: Vec<J>, f: F) -> Vec<Result<R>>
where
    F: Fn(J) -> Result<R>,
{
    jobs.into_iter().map(f).collect()
}

/// Run jobs across worker threads, returning results in job order.
///
/// `threads = None` lets the scheduler pick; `Some(n)` pins the pool width.
/// Without the `parallel` feature this is an alias for the sequential path.
#[cfg(feature = "parallel")]
pub fn run_jobs<J, R, F>(jobs: Vec<J>, f: F, threads: Option<usize>) -> Result<Vec<Result<R>>>
where
    J: Send,
    R: Send,
    F: Fn(J) -> Result<R> + Sync,
{
    use rayon::prelude::*;

    let map_all = |jobs: Vec<J>, f: &F| -> Vec<Result<R>> {
        jobs.into_par_iter().map(f).collect()
    };
    match threads {
        None => Ok(map_all(jobs, &f)),
        Some(0) => Err(Error::Usage("thread count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Usage(format!("could not build a {}-thread pool: {}", n, e)))?;
            Ok(pool.install(|| map_all(jobs, &f)))
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn run_jobs<J, R, F>(jobs: Vec<J>, f: F, threads: Option<usize>) -> Result<Vec<Result<R>>>
where
    J: Send,
    R: Send,
    F: Fn(J) -> Result<R> + Sync,
{
    if threads == Some(0) {
        return Err(Error::Usage("thread count must be at least 1".into()));
    }
    Ok(run_jobs_seq(jobs, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flaky_square(x: u64) -> Result<u64> {
        if x == 3 {
            Err(Error::Usage("three is right out".into()))
        } else {
            Ok(x * x)
        }
    }

    #[test]
    fn sequential_keeps_order_and_errors_in_place() {
        let out = run_jobs_seq(vec![1, 2, 3, 4], flaky_square);
        assert_eq!(out.len(), 4);
        assert_eq!(*out[0].as_ref().unwrap(), 1);
        assert_eq!(*out[3].as_ref().unwrap(), 16);
        assert!(out[2].is_err());
    }

    #[test]
    fn parallel_matches_sequential() {
        let jobs: Vec<u64> = (0..40).collect();
        let seq: Vec<Option<u64>> =
            run_jobs_seq(jobs.clone(), flaky_square).into_iter().map(|r| r.ok()).collect();
        let par: Vec<Option<u64>> = run_jobs(jobs.clone(), flaky_square, None)
            .unwrap()
            .into_iter()
            .map(|r| r.ok())
            .collect();
        let pinned: Vec<Option<u64>> = run_jobs(jobs, flaky_square, Some(2))
            .unwrap()
            .into_iter()
            .map(|r| r.ok())
            .collect();
        assert_eq!(seq, par);
        assert_eq!(seq, pinned);
    }

    #[test]
    fn zero_threads_are_rejected() {
        assert!(run_jobs(vec![1u64], flaky_square, Some(0)).is_err());
    }
}
