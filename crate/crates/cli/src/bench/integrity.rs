//! Copy accounting and channel correctness.

use std::time::Duration;

use serde::Serialize;

use fanout_core::control::engine::Engine;
use fanout_core::demo::{Topology, FM_LABELS, LIGHT_FEATURES};
use fanout_core::pipeline::backend::BackendDescriptor;
use fanout_core::pipeline::gate::Rate;
use fanout_core::shm;
use fanout_core::stress::{check_fifo_model, check_latest_model, stress_fifo, stress_latest};
use fanout_core::tensor_arena::{copy_count, copy_out, create_arena, ArenaLayout, DType, TensorSpec};
use fanout_core::{Error, Result};

use super::{BenchContext, BenchReport, Check};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntegrityRow {
    pub item: String,
    pub observed: u64,
    pub expected: u64,
}

impl IntegrityRow {
    fn new(item: impl Into<String>, observed: u64, expected: u64) -> Self {
        IntegrityRow {
            item: item.into(),
            observed,
            expected,
        }
    }

    fn ok(&self) -> bool {
        self.observed == self.expected
    }
}

struct Scratch(String);

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = shm::remove_namespace(&self.0);
    }
}

fn summarize(name: &str, rows: &[IntegrityRow]) -> Check {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.ok())
        .map(|r| format!("{} {} != {}", r.item, r.observed, r.expected))
        .collect();
    Check::new(
        name,
        bad.is_empty(),
        if bad.is_empty() { format!("{} counters match", rows.len()) } else { bad.join("; ") },
    )
}

/// In-process views and every non-empty label subset of the foundation
/// outputs copied into a destination arena.
fn local_copies() -> Result<Vec<IntegrityRow>> {
    let ns = Scratch(shm::new_namespace());
    let specs: Vec<TensorSpec> = FM_LABELS
        .iter()
        .map(|l| TensorSpec::new(*l, DType::F32, &LIGHT_FEATURES))
        .collect::<Result<_>>()?;
    let layout = ArenaLayout::new(specs.iter().cloned().enumerate().map(|(i, s)| (i as u32, s)).collect())?;
    let (src, _) = create_arena(&layout, &ns.0, "copies-src")?;
    let (dst, _) = create_arena(&layout, &ns.0, "copies-dst")?;
    let mut rows = Vec::new();

    let before = copy_count();
    let mut touched = 0u64;
    for slot in src.slots() {
        let view = src.read_view(slot)?;
        touched += view.as_bytes().iter().map(|&b| b as u64).sum::<u64>();
    }
    std::hint::black_box(touched);
    rows.push(IntegrityRow::new("views", copy_count() - before, 0));

    for mask in 1u32..(1 << FM_LABELS.len()) {
        let before = copy_count();
        for i in (0..FM_LABELS.len()).filter(|i| mask & (1 << i) != 0) {
            copy_out(&src, &src.slots()[i], &dst, &dst.slots()[i])?;
        }
        let picked: Vec<&str> = (0..FM_LABELS.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| FM_LABELS[i])
            .collect();
        rows.push(IntegrityRow::new(
            format!("subset {}", picked.join("+")),
            copy_count() - before,
            mask.count_ones() as u64,
        ));
    }
    Ok(rows)
}

/// Worker copy counters of an engine run against the labels each stage
/// subscribes to.
fn engine_copies(ctx: &BenchContext, frames: u64) -> Result<Vec<IntegrityRow>> {
    let topo = Topology::demo_shape(
        BackendDescriptor::synthetic(0.2, 0.0),
        BackendDescriptor::synthetic(0.1, 0.0),
        Rate::Unlimited,
    );
    let mut engine = Engine::start(topo.deployment(100.0, Some(frames))?, ctx.options())?;
    let finished = engine.wait_complete(Duration::from_millis(300), Duration::from_secs(frames / 50 + 30));
    let report = engine.stop()?;
    if !finished {
        return Err(Error::Resource("copy run did not finish".into()));
    }
    let mut rows = Vec::new();
    let fm = report
        .status
        .worker("foundation")
        .ok_or_else(|| Error::NotFound("foundation".into()))?
        .record;
    rows.push(IntegrityRow::new("foundation copies", fm.copies, fm.consumed));
    for (name, labels, ..) in &topo.heads {
        let r = report
            .status
            .worker(name)
            .ok_or_else(|| Error::NotFound(name.clone()))?
            .record;
        rows.push(IntegrityRow::new(format!("{name} copies"), r.copies, labels.len() as u64 * r.consumed));
    }
    Ok(rows)
}

pub fn bench_copies(ctx: &BenchContext, frames: u64) -> Result<BenchReport<IntegrityRow>> {
    let local = local_copies()?;
    let engine = engine_copies(ctx, frames)?;
    let checks = vec![summarize("in-process copies", &local), summarize("worker copies", &engine)];
    ctx.progress(format!("copies: {} local, {} worker counters", local.len(), engine.len()));
    Ok(BenchReport {
        rows: local.into_iter().chain(engine).collect(),
        checks,
    })
}

#[derive(Clone, Debug)]
pub struct ChannelSuiteParams {
    pub seeds: u64,
    pub ops: usize,
    pub stress_frames: u64,
    pub consumers: u32,
}

impl Default for ChannelSuiteParams {
    fn default() -> Self {
        ChannelSuiteParams {
            seeds: 64,
            ops: 400,
            stress_frames: 1_000_000,
            consumers: 3,
        }
    }
}

pub fn bench_channels(ctx: &BenchContext, p: &ChannelSuiteParams) -> Result<BenchReport<IntegrityRow>> {
    let ns = Scratch(shm::new_namespace());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..p.seeds {
        let capacity = 2 + (seed % 6) as u32;
        let consumers = 1 + (seed % 4) as u32;
        let scope = Scratch(shm::new_namespace());
        if let Err(e) = check_fifo_model(&scope.0, seed, p.ops, capacity) {
            failures.push(format!("fifo seed {seed}: {e}"));
        }
        let scope = Scratch(shm::new_namespace());
        if let Err(e) = check_latest_model(&scope.0, seed, p.ops, capacity, consumers) {
            failures.push(format!("latest seed {seed}: {e}"));
        }
    }
    rows.push(IntegrityRow::new("model mismatches", failures.len() as u64, 0));
    let mut checks = vec![Check::new(
        "sequential models",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} seeds x 2 modes x {} ops agree", p.seeds, p.ops)
        } else {
            failures.join("; ")
        },
    )];

    let latest = stress_latest(&ns.0, p.stress_frames, p.consumers, 0x5eed)?;
    ctx.progress(format!(
        "latest stress: {} reads, {} torn, {:.1} s",
        latest.reads_checked,
        latest.torn_reads,
        latest.elapsed.as_secs_f64()
    ));
    rows.push(IntegrityRow::new("latest torn reads", latest.torn_reads, 0));
    rows.push(IntegrityRow::new("latest order violations", latest.order_violations, 0));
    checks.push(Check::new(
        "latest stress",
        latest.passed(),
        format!(
            "{} frames, {} reads checked, {} torn, {} out of order, consumed {:?}, conserved {}",
            latest.frames,
            latest.reads_checked,
            latest.torn_reads,
            latest.order_violations,
            latest.consumed,
            latest.conserved
        ),
    ));

    let fifo = stress_fifo(&ns.0, p.stress_frames, 8, 0x5eed)?;
    ctx.progress(format!("fifo stress: {} reads, {:.1} s", fifo.reads_checked, fifo.elapsed.as_secs_f64()));
    rows.push(IntegrityRow::new("fifo torn reads", fifo.torn_reads, 0));
    rows.push(IntegrityRow::new("fifo order violations", fifo.order_violations, 0));
    checks.push(Check::new(
        "fifo stress",
        fifo.passed(),
        format!(
            "{} frames, {} reads checked, {} torn, {} out of order, conserved {}",
            fifo.frames, fifo.reads_checked, fifo.torn_reads, fifo.order_violations, fifo.conserved
        ),
    ));
    Ok(BenchReport { rows, checks })
}
