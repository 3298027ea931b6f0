//! Per-head output counts under rate gating.

use std::time::Duration;

use serde::Serialize;

use fanout_core::control::engine::Engine;
use fanout_core::demo::Topology;
use fanout_core::pipeline::backend::BackendDescriptor;
use fanout_core::pipeline::gate::Rate;
use fanout_core::{Error, Result};

use super::{BenchContext, BenchReport, Check};

#[derive(Clone, Debug)]
pub struct RateParams {
    pub rates: Vec<f64>,
    pub input_hz: f64,
    pub seconds: u64,
    pub tolerance: u64,
}

impl Default for RateParams {
    fn default() -> Self {
        RateParams {
            rates: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            input_hz: 30.0,
            seconds: 10,
            tolerance: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub rate_hz: f64,
    pub head: String,
    pub outputs: u64,
    pub expected: u64,
    pub delta: i64,
}

pub fn bench_rate(ctx: &BenchContext, p: &RateParams) -> Result<BenchReport<RateRow>> {
    if p.rates.is_empty() || p.seconds == 0 {
        return Err(Error::Config("rate bench needs rates and a duration".into()));
    }
    let frames = (p.input_hz * p.seconds as f64).round() as u64;
    let mut rows = Vec::new();
    for &r in &p.rates {
        let rate = Rate::Hz(r);
        rate.validate()?;
        let topo = Topology::demo_shape(
            BackendDescriptor::synthetic(0.3, 0.0),
            BackendDescriptor::synthetic(0.2, 0.0),
            rate,
        );
        let mut engine = Engine::start(topo.deployment(p.input_hz, Some(frames))?, ctx.options())?;
        let finished = engine.wait_complete(Duration::from_millis(300), Duration::from_secs(p.seconds + 30));
        let report = engine.stop()?;
        if !finished {
            return Err(Error::Resource(format!("rate run at {r} Hz did not finish")));
        }
        let expected = (r * p.seconds as f64).round() as u64;
        for (name, _, _, _) in &topo.heads {
            let outputs = report
                .status
                .worker(name)
                .map(|w| w.record.outputs)
                .unwrap_or_default();
            rows.push(RateRow {
                rate_hz: r,
                head: name.clone(),
                outputs,
                expected,
                delta: outputs as i64 - expected as i64,
            });
        }
        ctx.progress(format!(
            "rate {r} Hz: {}",
            rows.iter()
                .rev()
                .take(topo.heads.len())
                .map(|row| format!("{}={}", row.head, row.outputs))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| r.delta.unsigned_abs() > p.tolerance)
        .map(|r| format!("{}@{}Hz {:+}", r.head, r.rate_hz, r.delta))
        .collect();
    let worst = rows.iter().map(|r| r.delta.abs()).max().unwrap_or(0);
    let checks = vec![Check::new(
        "outputs within tolerance",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} cells, worst |delta| {worst} (limit {})", rows.len(), p.tolerance)
        } else {
            format!("out of tolerance: {}", bad.join(", "))
        },
    )];
    Ok(BenchReport { rows, checks })
}
