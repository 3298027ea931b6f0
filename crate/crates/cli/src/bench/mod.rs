//! Benchmark scenarios. Every comparison runs the same cards over the same
//! frames; only topology and serialization differ.

pub mod backbone;
pub mod fault;
pub mod integrity;
pub mod memory;
pub mod parallel;
pub mod rate;
pub mod serialized;

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use fanout_core::control::engine::{Engine, EngineOptions, WorkerCommand};
use fanout_core::demo::{Topology, FM_LABELS};
use fanout_core::metrics::{median, MergedMetrics};
use fanout_core::pipeline::backend::{fill_pattern, BackendDescriptor};
use fanout_core::pipeline::worker::ModelStage;
use fanout_core::registry::ModelCard;
use fanout_core::{Error, Result};

/// Frames excluded from timing at the start of every run.
pub const WARMUP: u64 = 3;
pub const MIN_FRAMES: u64 = 100;

#[derive(Clone, Debug)]
pub struct BenchContext {
    pub worker: WorkerCommand,
    /// Print progress lines to standard error.
    pub verbose: bool,
}

impl BenchContext {
    pub fn new(worker: WorkerCommand) -> Self {
        BenchContext { worker, verbose: false }
    }

    pub fn options(&self) -> EngineOptions {
        EngineOptions::new(self.worker.clone())
    }

    pub fn progress(&self, line: impl fmt::Display) {
        if self.verbose {
            eprintln!("{line}");
        }
    }
}

/// One named pass/fail condition of a benchmark.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport<R> {
    pub rows: Vec<R>,
    pub checks: Vec<Check>,
}

impl<R: Serialize> BenchReport<R> {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let io = |e: csv::Error| Error::Resource(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn check_frames(frames: u64) -> Result<()> {
    if frames < MIN_FRAMES {
        return Err(Error::Config(format!("at least {MIN_FRAMES} frames are needed, got {frames}")));
    }
    Ok(())
}

pub fn check_tasks(tasks: &[usize]) -> Result<()> {
    if tasks.is_empty() || tasks.iter().any(|&n| !(1..=8).contains(&n)) {
        return Err(Error::Config(format!("task counts must lie in 1..=8, got {tasks:?}")));
    }
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Digest of everything that determines compute cost: backends, frame
/// geometry and frame count.
pub fn cost_fingerprint(fm: &BackendDescriptor, head: &BackendDescriptor, frames: u64) -> String {
    let body = serde_json::json!({
        "fm": fm,
        "head": head,
        "frames": frames,
        "resolution": fanout_core::demo::LIGHT_RESOLUTION,
        "features": fanout_core::demo::LIGHT_FEATURES,
        "labels": FM_LABELS,
    });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Timing of one lockstep engine run.
#[derive(Clone, Debug)]
pub struct EngineRun {
    /// Mean insertion-to-last-head latency per frame.
    pub mean_latency_ms: f64,
    /// Mean spacing between consecutive frame insertions.
    pub mean_cycle_ms: f64,
    /// Median latency minus the slowest backend path.
    pub median_overhead_ms: f64,
    pub complete_frames: usize,
    pub metrics: MergedMetrics,
}

impl EngineRun {
    pub fn hz(&self) -> f64 {
        1e3 / self.mean_cycle_ms
    }
}

/// Runs `frames` frames through the engine, each inserted only after every
/// head finished the previous one.
pub fn run_lockstep(
    ctx: &BenchContext,
    topo: &Topology,
    frames: u64,
    exec_token: bool,
    pin_cpu: Option<usize>,
) -> Result<EngineRun> {
    let mut opts = ctx.options();
    opts.lockstep = true;
    opts.exec_token = exec_token;
    opts.pin_cpu = pin_cpu;
    opts.lockstep_timeout = Duration::from_secs(5);
    let dep = topo.deployment(0.0, Some(frames))?;
    let mut engine = Engine::start(dep, opts)?;
    let finished = engine.wait_complete(Duration::from_millis(200), Duration::from_secs(600));
    let report = engine.stop()?;
    if !finished {
        return Err(Error::Resource("lockstep run did not finish".into()));
    }
    let measured: Vec<_> = report
        .metrics
        .complete()
        .filter(|r| r.frame_id > WARMUP)
        .collect();
    if measured.len() < 2 {
        return Err(Error::Resource(format!("only {} complete frames", measured.len())));
    }
    let latency: Vec<f64> = measured.iter().filter_map(|r| r.latency_ns()).map(ms).collect();
    let overheads: Vec<i64> = measured.iter().filter_map(|r| r.overhead_ns()).collect();
    let inserted: Vec<u64> = measured.iter().map(|r| r.t_inserted).collect();
    let cycles: Vec<f64> = inserted.windows(2).map(|w| ms(w[1].saturating_sub(w[0]))).collect();
    Ok(EngineRun {
        mean_latency_ms: mean(&latency),
        mean_cycle_ms: mean(&cycles),
        median_overhead_ms: median(&overheads).unwrap_or(0) as f64 / 1e6,
        complete_frames: measured.len() + WARMUP as usize,
        metrics: report.metrics,
    })
}

/// Mean per-frame time of running the topology's cards one after another in
/// this process. `independent` reruns the foundation before every head, as
/// separate full models would.
pub fn run_sequential(topo: &Topology, frames: u64, independent: bool) -> Result<f64> {
    let (fm_card, head_cards) = topo.cards();
    let mut fm_stages = if independent {
        head_cards.iter().map(|_| ModelStage::new(&fm_card)).collect::<Result<Vec<_>>>()?
    } else {
        vec![ModelStage::new(&fm_card)?]
    };
    let mut heads = head_cards.iter().map(ModelStage::new).collect::<Result<Vec<_>>>()?;
    let mut image = vec![0u8; fm_card.input_specs[0].byte_size()];
    let fm_specs = fm_card.published_specs()?;
    let mut features: Vec<Vec<u8>> = fm_specs.iter().map(|s| vec![0u8; s.byte_size()]).collect();
    let mut outputs: Vec<Vec<Vec<u8>>> = head_cards
        .iter()
        .map(|c| c.published_specs().map(|specs| specs.iter().map(|s| vec![0u8; s.byte_size()]).collect()))
        .collect::<Result<_>>()?;
    let picks: Vec<Vec<usize>> = head_cards.iter().map(|c| subscription(c, &fm_specs)).collect::<Result<_>>()?;

    let mut times = Vec::with_capacity(frames as usize);
    for frame in 1..=frames {
        fill_pattern(&mut image, frame.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let t = std::time::Instant::now();
        for (i, head) in heads.iter_mut().enumerate() {
            if independent || i == 0 {
                let stage = &mut fm_stages[if independent { i } else { 0 }];
                let mut dst: Vec<&mut [u8]> = features.iter_mut().map(|b| b.as_mut_slice()).collect();
                stage.run(&[&image], &mut dst)?;
            }
            let inputs: Vec<&[u8]> = picks[i].iter().map(|&k| features[k].as_slice()).collect();
            let mut dst: Vec<&mut [u8]> = outputs[i].iter_mut().map(|b| b.as_mut_slice()).collect();
            head.run(&inputs, &mut dst)?;
        }
        if frame > WARMUP {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(mean(&times))
}

fn subscription(card: &ModelCard, fm_specs: &[fanout_core::tensor_arena::TensorSpec]) -> Result<Vec<usize>> {
    card.input_specs
        .iter()
        .map(|s| {
            fm_specs
                .iter()
                .position(|f| f.label == s.label)
                .ok_or_else(|| Error::Label(s.label.clone()))
        })
        .collect()
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_a_line() {
        let pts: Vec<(f64, f64)> = (1..=8).map(|x| (x as f64, 3.0 * x as f64 + 7.0)).collect();
        let (m, b, r2) = linear_fit(&pts);
        assert!((m - 3.0).abs() < 1e-9 && (b - 7.0).abs() < 1e-9);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_cost_parameters() {
        let a = BackendDescriptor::synthetic(4.0, 0.0);
        let b = BackendDescriptor::synthetic(2.0, 0.0);
        assert_eq!(cost_fingerprint(&a, &b, 100), cost_fingerprint(&a, &b, 100));
        assert_ne!(cost_fingerprint(&a, &b, 100), cost_fingerprint(&b, &a, 100));
        assert_ne!(cost_fingerprint(&a, &b, 100), cost_fingerprint(&a, &b, 101));
    }

    #[test]
    fn sequential_oracle_matches_cost_model() {
        let topo = Topology::uniform(
            BackendDescriptor::synthetic(2.0, 0.0),
            BackendDescriptor::synthetic(1.0, 0.0),
            3,
            fanout_core::pipeline::gate::Rate::Unlimited,
        );
        let shared = run_sequential(&topo, 20, false).unwrap();
        let independent = run_sequential(&topo, 20, true).unwrap();
        // 2 + 3x1 ms and 3 x (2 + 1) ms of spinning, plus transform work.
        assert!((5.0..6.5).contains(&shared), "{shared}");
        assert!((9.0..10.5).contains(&independent), "{independent}");
    }
}
