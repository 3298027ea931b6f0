//! Parallel heads with and without the global execution token.

use serde::Serialize;

use fanout_core::Result;

use super::parallel::{idle_topology, ParallelParams};
use super::{check_frames, check_tasks, run_lockstep, BenchContext, BenchReport, Check};

#[derive(Clone, Debug)]
pub struct SerializedParams {
    pub tasks: Vec<usize>,
    pub frames: u64,
    pub fm_ms: f64,
    pub head_busy_ms: f64,
    pub head_idle_ms: f64,
    /// Required speedups (percent) keyed by n.
    pub thresholds: Vec<(usize, f64)>,
}

impl Default for SerializedParams {
    fn default() -> Self {
        SerializedParams {
            tasks: (1..=8).collect(),
            frames: 426,
            fm_ms: 2.0,
            head_busy_ms: 0.5,
            head_idle_ms: 25.0,
            thresholds: vec![(4, 30.0), (8, 60.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SerializedRow {
    pub n: usize,
    pub hz_serialized: f64,
    pub hz_free: f64,
    pub speedup_pct: f64,
}

pub fn bench_serialized(ctx: &BenchContext, p: &SerializedParams) -> Result<BenchReport<SerializedRow>> {
    check_frames(p.frames)?;
    check_tasks(&p.tasks)?;
    let shape = ParallelParams {
        fm_ms: p.fm_ms,
        head_busy_ms: p.head_busy_ms,
        head_idle_ms: p.head_idle_ms,
        ..ParallelParams::default()
    };
    let mut rows = Vec::new();
    for &n in &p.tasks {
        let topo = idle_topology(&shape, n);
        let serialized = run_lockstep(ctx, &topo, p.frames, true, None)?;
        let free = run_lockstep(ctx, &topo, p.frames, false, None)?;
        let row = SerializedRow {
            n,
            hz_serialized: serialized.hz(),
            hz_free: free.hz(),
            speedup_pct: (free.hz() / serialized.hz() - 1.0) * 100.0,
        };
        ctx.progress(format!(
            "serialized n={n}: token {:.1} Hz, free {:.1} Hz, speedup {:.1}%",
            row.hz_serialized, row.hz_free, row.speedup_pct
        ));
        rows.push(row);
    }
    let checks = p
        .thresholds
        .iter()
        .filter_map(|&(n, need)| {
            let r = rows.iter().find(|r| r.n == n)?;
            Some(Check::new(
                format!("speedup at n={n}"),
                r.speedup_pct >= need,
                format!("{:.1}% (need {need:.0}%)", r.speedup_pct),
            ))
        })
        .collect();
    Ok(BenchReport { rows, checks })
}
