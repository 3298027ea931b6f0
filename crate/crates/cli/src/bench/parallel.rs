//! Heads in separate processes versus the same heads run sequentially in
//! one process, with idle-heavy backends.

use serde::Serialize;

use fanout_core::demo::Topology;
use fanout_core::pipeline::backend::BackendDescriptor;
use fanout_core::pipeline::gate::Rate;
use fanout_core::Result;

use super::{check_frames, check_tasks, run_lockstep, run_sequential, BenchContext, BenchReport, Check};

#[derive(Clone, Debug)]
pub struct ParallelParams {
    pub tasks: Vec<usize>,
    pub frames: u64,
    pub fm_ms: f64,
    pub head_busy_ms: f64,
    pub head_idle_ms: f64,
    /// Required speedup at n = 8.
    pub min_ratio: f64,
    pub max_overhead_ms: f64,
}

impl Default for ParallelParams {
    fn default() -> Self {
        ParallelParams {
            tasks: (1..=8).collect(),
            frames: 426,
            fm_ms: 2.0,
            head_busy_ms: 0.5,
            head_idle_ms: 25.0,
            min_ratio: 2.0,
            max_overhead_ms: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParallelRow {
    pub n: usize,
    pub mean_ms_parallel: f64,
    pub mean_ms_sequential: f64,
    pub ratio: f64,
    /// Median per-frame latency not explained by the slowest backend path.
    pub overhead_ms: f64,
}

pub fn idle_topology(p: &ParallelParams, n: usize) -> Topology {
    Topology::uniform(
        BackendDescriptor::synthetic(p.fm_ms, 0.0),
        BackendDescriptor::synthetic(p.head_busy_ms, p.head_idle_ms),
        n,
        Rate::Unlimited,
    )
}

pub fn bench_parallel(ctx: &BenchContext, p: &ParallelParams) -> Result<BenchReport<ParallelRow>> {
    check_frames(p.frames)?;
    check_tasks(&p.tasks)?;
    let mut rows = Vec::new();
    for &n in &p.tasks {
        let topo = idle_topology(p, n);
        let parallel = run_lockstep(ctx, &topo, p.frames, false, None)?;
        let sequential = run_sequential(&topo, p.frames, false)?;
        let row = ParallelRow {
            n,
            mean_ms_parallel: parallel.mean_latency_ms,
            mean_ms_sequential: sequential,
            ratio: sequential / parallel.mean_latency_ms,
            overhead_ms: parallel.median_overhead_ms,
        };
        ctx.progress(format!(
            "parallel n={n}: parallel {:.2} ms, sequential {:.2} ms, ratio {:.2}, overhead {:.2} ms",
            row.mean_ms_parallel, row.mean_ms_sequential, row.ratio, row.overhead_ms
        ));
        rows.push(row);
    }
    let mut checks = Vec::new();
    if let Some(r8) = rows.iter().find(|r| r.n == 8) {
        checks.push(Check::new(
            "speedup at n=8",
            r8.ratio >= p.min_ratio,
            format!("{:.2}x (need {:.1}x)", r8.ratio, p.min_ratio),
        ));
    }
    let worst = rows.iter().map(|r| r.overhead_ms).fold(f64::MIN, f64::max);
    checks.push(Check::new(
        "engine overhead",
        worst <= p.max_overhead_ms,
        format!("largest median overhead {worst:.2} ms (limit {:.1} ms)", p.max_overhead_ms),
    ));
    Ok(BenchReport { rows, checks })
}
