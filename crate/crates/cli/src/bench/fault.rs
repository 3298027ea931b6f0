//! Throughput of surviving heads before and after one head fails.

use std::time::{Duration, Instant};

use serde::Serialize;

use fanout_core::control::block::WorkerState;
use fanout_core::control::engine::Engine;
use fanout_core::demo::Topology;
use fanout_core::pipeline::backend::BackendDescriptor;
use fanout_core::pipeline::gate::Rate;
use fanout_core::{Error, Result};

use super::{BenchContext, BenchReport, Check};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    Kill,
    Panic,
    Stall,
}

#[derive(Clone, Debug)]
pub struct FaultParams {
    pub modes: Vec<FaultMode>,
    /// Heads to fail, one per run; empty means every head.
    pub victims: Vec<String>,
    pub window: Duration,
    pub head_rate: Rate,
    pub input_hz: f64,
    pub min_ratio: f64,
}

impl Default for FaultParams {
    fn default() -> Self {
        FaultParams {
            modes: vec![FaultMode::Kill],
            victims: Vec::new(),
            window: Duration::from_secs(5),
            head_rate: Rate::Hz(10.0),
            input_hz: 30.0,
            min_ratio: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaultRow {
    pub victim: String,
    pub mode: FaultMode,
    pub head: String,
    pub before_hz: f64,
    pub after_hz: f64,
    pub ratio: f64,
}

fn window_rates(engine: &Engine, heads: &[String], window: Duration) -> Vec<f64> {
    let before: Vec<u64> = heads.iter().map(|h| engine.record(h).map(|r| r.outputs).unwrap_or(0)).collect();
    std::thread::sleep(window);
    heads
        .iter()
        .zip(before)
        .map(|(h, b)| (engine.record(h).map(|r| r.outputs).unwrap_or(0) - b) as f64 / window.as_secs_f64())
        .collect()
}

fn inject(engine: &mut Engine, victim: &str, mode: FaultMode) -> Result<()> {
    match mode {
        FaultMode::Kill => engine.signal_worker(victim, libc::SIGKILL),
        FaultMode::Stall => engine.signal_worker(victim, libc::SIGSTOP),
        FaultMode::Panic => match engine.dispatch_text(&format!("FAULT {victim}")) {
            fanout_core::control::protocol::Reply::Ok(_) => Ok(()),
            other => Err(Error::Protocol(format!("fault injection refused: {other:?}"))),
        },
    }
}

pub fn bench_fault(ctx: &BenchContext, p: &FaultParams) -> Result<BenchReport<FaultRow>> {
    let topo = Topology::demo_shape(
        BackendDescriptor::synthetic(0.3, 0.0),
        BackendDescriptor::synthetic(0.2, 0.0),
        p.head_rate,
    );
    let names: Vec<String> = topo.heads.iter().map(|h| h.0.clone()).collect();
    let victims = if p.victims.is_empty() { names.clone() } else { p.victims.clone() };
    let mut rows = Vec::new();
    let mut unclean = Vec::new();
    let mut undetected = Vec::new();
    for &mode in &p.modes {
        for victim in &victims {
            if !names.contains(victim) {
                return Err(Error::NotFound(format!("head {victim}")));
            }
            let mut engine = Engine::start(topo.deployment(p.input_hz, None)?, ctx.options())?;
            std::thread::sleep(Duration::from_millis(500));
            let others: Vec<String> = names.iter().filter(|n| *n != victim).cloned().collect();
            let before = window_rates(&engine, &others, p.window);
            inject(&mut engine, victim, mode)?;
            let deadline = Instant::now() + Duration::from_secs(3);
            while engine.status().worker(victim).map(|w| w.state) != Some(WorkerState::Failed) {
                if Instant::now() > deadline {
                    undetected.push(format!("{victim}/{mode:?}"));
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let after = window_rates(&engine, &others, p.window);
            let report = engine.stop()?;
            if !report.clean {
                unclean.push(format!("{victim}/{mode:?}"));
            }
            for ((head, b), a) in others.iter().zip(&before).zip(&after) {
                let row = FaultRow {
                    victim: victim.clone(),
                    mode,
                    head: head.clone(),
                    before_hz: *b,
                    after_hz: *a,
                    ratio: if *b > 0.0 { a / b } else { 0.0 },
                };
                ctx.progress(format!(
                    "fault {mode:?} {victim}: {head} {:.2} -> {:.2} Hz",
                    row.before_hz, row.after_hz
                ));
                rows.push(row);
            }
        }
    }
    let worst = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::new(
            "surviving throughput",
            worst >= p.min_ratio,
            format!("worst after/before ratio {worst:.3} (need {:.2})", p.min_ratio),
        ),
        Check::new(
            "failure detected",
            undetected.is_empty(),
            if undetected.is_empty() { "every victim marked Failed".to_string() } else { undetected.join(", ") },
        ),
        Check::new(
            "clean stop",
            unclean.is_empty(),
            if unclean.is_empty() { "all runs stopped cleanly".to_string() } else { unclean.join(", ") },
        ),
    ];
    Ok(BenchReport { rows, checks })
}
