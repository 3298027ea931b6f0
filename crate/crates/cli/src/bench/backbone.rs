//! One shared foundation feeding n heads versus n independent
//! foundation+head models run back to back.

use serde::Serialize;

use fanout_core::demo::Topology;
use fanout_core::pipeline::backend::BackendDescriptor;
use fanout_core::pipeline::gate::Rate;
use fanout_core::Result;

use super::{check_frames, check_tasks, cost_fingerprint, run_lockstep, run_sequential, BenchContext, BenchReport, Check};

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub tasks: Vec<usize>,
    pub frames: u64,
    /// Busy (CPU-saturating) milliseconds of the foundation.
    pub fm_ms: f64,
    pub head_ms: f64,
    /// Allowed relative deviation from the cost model at the largest n.
    pub tolerance: f64,
}

impl Default for BackboneParams {
    fn default() -> Self {
        BackboneParams {
            tasks: (1..=8).collect(),
            frames: 426,
            fm_ms: 4.0,
            head_ms: 2.0,
            tolerance: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackboneRow {
    pub n: usize,
    pub mean_ms_shared: f64,
    pub mean_ms_independent: f64,
    pub ratio: f64,
    pub analytic_ratio: f64,
}

/// `n (t_fm + t_head) / (t_fm + n t_head)`.
pub fn analytic_ratio(n: usize, fm_ms: f64, head_ms: f64) -> f64 {
    let n = n as f64;
    n * (fm_ms + head_ms) / (fm_ms + n * head_ms)
}

pub fn bench_backbone(ctx: &BenchContext, p: &BackboneParams) -> Result<BenchReport<BackboneRow>> {
    check_frames(p.frames)?;
    check_tasks(&p.tasks)?;
    let fm = BackendDescriptor::synthetic(p.fm_ms, 0.0);
    let head = BackendDescriptor::synthetic(p.head_ms, 0.0);
    let mut rows = Vec::new();
    let mut fair = true;
    for &n in &p.tasks {
        let topo = Topology::uniform(fm.clone(), head.clone(), n, Rate::Unlimited);
        // Shared heads compete for one core, like kernels saturating one GPU.
        let shared = run_lockstep(ctx, &topo, p.frames, false, Some(0))?;
        let independent = run_sequential(&topo, p.frames, true)?;
        fair &= cost_fingerprint(&topo.fm, &topo.heads[0].2, p.frames) == cost_fingerprint(&fm, &head, p.frames);
        let row = BackboneRow {
            n,
            mean_ms_shared: shared.mean_latency_ms,
            mean_ms_independent: independent,
            ratio: independent / shared.mean_latency_ms,
            analytic_ratio: analytic_ratio(n, p.fm_ms, p.head_ms),
        };
        ctx.progress(format!(
            "backbone n={n}: shared {:.2} ms, independent {:.2} ms, ratio {:.2} (model {:.2})",
            row.mean_ms_shared, row.mean_ms_independent, row.ratio, row.analytic_ratio
        ));
        rows.push(row);
    }
    let last = rows.last().expect("tasks checked non-empty");
    let deviation = (last.ratio - last.analytic_ratio).abs() / last.analytic_ratio;
    let monotonic = rows.windows(2).all(|w| w[1].ratio > w[0].ratio);
    let checks = vec![
        Check::new(
            "oracle agreement",
            deviation <= p.tolerance,
            format!(
                "n={} ratio {:.3} vs model {:.3} ({:.1}% off, limit {:.0}%)",
                last.n,
                last.ratio,
                last.analytic_ratio,
                deviation * 100.0,
                p.tolerance * 100.0
            ),
        ),
        Check::new(
            "monotonic in n",
            monotonic,
            rows.iter().map(|r| format!("{:.2}", r.ratio)).collect::<Vec<_>>().join(" < "),
        ),
        Check::new("identical cost parameters", fair, "scenario fingerprints compared"),
    ];
    Ok(BenchReport { rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_ratio_examples() {
        assert!((analytic_ratio(1, 7.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((analytic_ratio(8, 7.0, 1.0) - 64.0 / 15.0).abs() < 1e-12);
        assert!((analytic_ratio(8, 2.0, 1.0) - 2.4).abs() < 1e-12);
    }

    #[test]
    fn too_few_frames_is_a_config_error() {
        let ctx = BenchContext::new(fanout_core::control::engine::WorkerCommand::new("unused"));
        let p = BackboneParams {
            frames: 99,
            ..Default::default()
        };
        assert!(matches!(bench_backbone(&ctx, &p), Err(fanout_core::Error::Config(_))));
    }
}
