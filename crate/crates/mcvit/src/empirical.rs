//! Instrumented runs with wall time, and the worker-capped parallel helper
//! used by sweeps.

use std::time::Instant;

use mcvit_core::runtime::{run, ModelConfig, ModelParams, RunStats, VideoEmbedding};
use mcvit_core::Tensor;

use crate::error::Result;

/// Wall-clock time plus the shape-derived counters of one real forward
/// pass. The counters must (and do, see the parity tests) match the
/// analytic cost model exactly; wall time is informational.
#[derive(Debug)]
pub struct EmpiricalReport {
    pub wall_nanos: u128,
    pub stats: RunStats,
    pub embedding: VideoEmbedding,
}

pub fn measure_empirical(
    tokens: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EmpiricalReport> {
    let start = Instant::now();
    let (embedding, stats) = run(tokens, params, cfg)?;
    Ok(EmpiricalReport {
        wall_nanos: start.elapsed().as_nanos(),
        stats,
        embedding,
    })
}

/// Worker cap: `MCVIT_THREADS` when set (minimum 1), otherwise available
/// parallelism.
pub fn worker_cap() -> usize {
    match std::env::var("MCVIT_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

/// Map `f` over `items` with at most `worker_cap()` worker threads,
/// preserving input order in the output.
pub fn parallel_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
{
    let workers = worker_cap().min(items.len().max(1));
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<U>> = items.iter().map(|_| None).collect();
    let jobs: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(jobs);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                match job {
                    Some((index, item)) => {
                        let out = f(item);
                        results.lock().expect("results lock")[index] = Some(out);
                    }
                    None => break,
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("job completed")).collect()
}
