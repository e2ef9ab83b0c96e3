//! Fan independent jobs out over threads.
//!
//! Each job writes only under its own directory, so the worker count never
//! changes what ends up on disk.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{CliError, Result};

pub const WORKERS_ENV: &str = "GIL_WORKERS";

/// `GIL_WORKERS` if set, otherwise the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Run `f` on every job, in any order, with per-worker state from `init`.
/// Results come back in job order.
pub fn fan_out<J, S, T, I, F>(jobs: &[J], workers: usize, init: I, f: F) -> Vec<Result<T>>
where
    J: Sync,
    T: Send,
    I: Fn() -> S + Sync,
    F: Fn(&mut S, &J) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| {
                let mut state = init();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let r = f(&mut state, job);
                    *slots[i].lock().unwrap() = Some(r);
                }
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every job ran")).collect()
}
