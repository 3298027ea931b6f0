//! Shared-memory footprint over a long run, its growth per head, and frame
//! loss at matched rates.

use std::time::{Duration, Instant};

use serde::Serialize;

use fanout_core::control::engine::Engine;
use fanout_core::demo::Topology;
use fanout_core::pipeline::backend::BackendDescriptor;
use fanout_core::pipeline::gate::Rate;
use fanout_core::{shm, Error, Result};

use super::{linear_fit, BenchContext, BenchReport, Check};

#[derive(Clone, Debug)]
pub struct MemoryParams {
    pub frames: u64,
    pub input_hz: f64,
    /// Head counts for the footprint fit.
    pub heads: Vec<usize>,
    pub max_loss: f64,
    pub min_r2: f64,
}

impl Default for MemoryParams {
    fn default() -> Self {
        MemoryParams {
            frames: 10_000,
            input_hz: 200.0,
            heads: (1..=8).collect(),
            max_loss: 0.001,
            min_r2: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRow {
    /// `trace` (x = seconds since start) or `heads` (x = head count).
    pub series: String,
    pub x: u64,
    pub resident_bytes: u64,
}

fn light(n: Option<usize>) -> Topology {
    let fm = BackendDescriptor::synthetic(0.3, 0.0);
    let head = BackendDescriptor::synthetic(0.2, 0.0);
    match n {
        Some(n) => Topology::uniform(fm, head, n, Rate::Unlimited),
        None => Topology::demo_shape(fm, head, Rate::Unlimited),
    }
}

pub fn bench_memory(ctx: &BenchContext, p: &MemoryParams) -> Result<BenchReport<MemoryRow>> {
    if p.frames == 0 || p.input_hz <= 0.0 || p.heads.len() < 2 {
        return Err(Error::Config("memory bench needs frames, a positive rate and two head counts".into()));
    }
    let mut rows = Vec::new();
    let mut checks = Vec::new();

    let topo = light(None);
    let mut engine = Engine::start(topo.deployment(p.input_hz, Some(p.frames))?, ctx.options())?;
    let ns = engine.namespace().to_string();
    let started = Instant::now();
    let mut samples = Vec::new();
    let limit = Duration::from_secs_f64(p.frames as f64 / p.input_hz + 60.0);
    loop {
        let (_, bytes) = shm::namespace_footprint(&ns)?;
        let t = started.elapsed().as_secs();
        samples.push(bytes);
        rows.push(MemoryRow {
            series: "trace".into(),
            x: t,
            resident_bytes: bytes,
        });
        if engine.source_done() || started.elapsed() > limit {
            break;
        }
        ctx.progress(format!("memory t={t}s resident {bytes} B"));
        let next = Duration::from_secs(t + 1);
        std::thread::sleep(next.saturating_sub(started.elapsed()));
    }
    let finished = engine.wait_complete(Duration::from_millis(300), Duration::from_secs(30));
    let report = engine.stop()?;
    if !finished {
        return Err(Error::Resource("memory run did not finish".into()));
    }
    let (lo, hi) = (samples.iter().min().copied().unwrap_or(0), samples.iter().max().copied().unwrap_or(0));
    checks.push(Check::new(
        "constant footprint",
        hi == lo && samples.len() >= 2,
        format!("{} samples, min {lo} B, max {hi} B", samples.len()),
    ));
    checks.push(Check::new(
        "no post-init allocation",
        report.status.post_init_regions == 0,
        format!("{} regions created after init", report.status.post_init_regions),
    ));
    let pushed = report.status.channel("input").map(|c| c.pushed).unwrap_or(0);
    let losses: Vec<(String, f64)> = topo
        .heads
        .iter()
        .map(|(name, ..)| {
            let out = report.status.worker(name).map(|w| w.record.outputs).unwrap_or(0);
            (name.clone(), p.frames.saturating_sub(out) as f64 / p.frames as f64)
        })
        .collect();
    let worst = losses.iter().map(|l| l.1).fold(0.0, f64::max);
    checks.push(Check::new(
        "frame loss",
        worst <= p.max_loss && pushed == p.frames,
        format!(
            "{} frames pushed; loss {} (limit {:.2}%)",
            pushed,
            losses
                .iter()
                .map(|(n, l)| format!("{n} {:.3}%", l * 100.0))
                .collect::<Vec<_>>()
                .join(", "),
            p.max_loss * 100.0
        ),
    ));

    let mut points = Vec::new();
    for &n in &p.heads {
        let mut engine = Engine::start(light(Some(n)).deployment(p.input_hz, Some(0))?, ctx.options())?;
        let bytes = engine.status().resident_bytes;
        engine.stop()?;
        points.push((n as f64, bytes as f64));
        rows.push(MemoryRow {
            series: "heads".into(),
            x: n as u64,
            resident_bytes: bytes,
        });
        ctx.progress(format!("memory heads={n}: {bytes} B"));
    }
    let (slope, intercept, r2) = linear_fit(&points);
    checks.push(Check::new(
        "affine in head count",
        r2 > p.min_r2,
        format!("{slope:.0} B per head + {intercept:.0} B, r2 {r2:.6}"),
    ));
    Ok(BenchReport { rows, checks })
}
