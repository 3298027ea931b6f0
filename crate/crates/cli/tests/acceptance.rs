//! Runs every acceptance criterion at full tolerance and prints one
//! PASS/FAIL line per criterion.

use std::time::Instant;

use fanout::bench::backbone::{bench_backbone, BackboneParams};
use fanout::bench::fault::{bench_fault, FaultParams};
use fanout::bench::integrity::{bench_channels, bench_copies, ChannelSuiteParams};
use fanout::bench::memory::{bench_memory, MemoryParams};
use fanout::bench::parallel::{bench_parallel, ParallelParams};
use fanout::bench::rate::{bench_rate, RateParams};
use fanout::bench::serialized::{bench_serialized, SerializedParams};
use fanout::bench::{BenchContext, Check};
use fanout_core::control::engine::WorkerCommand;
use fanout_core::Result;

struct Verdict {
    id: usize,
    name: &'static str,
    checks: Vec<Check>,
}

impl Verdict {
    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn print(&self) {
        let detail: Vec<String> = self.checks.iter().map(|c| format!("[{c}]")).collect();
        println!(
            "{} {:>2} {}: {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            detail.join(" ")
        );
    }
}

fn outcome(result: Result<Vec<Check>>) -> Vec<Check> {
    result.unwrap_or_else(|e| vec![Check::new("run", false, e.to_string())])
}

fn pick(checks: &[Check], names: &[&str]) -> Vec<Check> {
    checks.iter().filter(|c| names.contains(&c.name.as_str())).cloned().collect()
}

fn main() {
    let mut ctx = BenchContext::new(WorkerCommand::new(env!("CARGO_BIN_EXE_fanout")).arg("worker"));
    ctx.verbose = std::env::var_os("FANOUT_VERBOSE").is_some();
    let started = Instant::now();
    let mut verdicts = Vec::new();
    let mut record = |id, name, checks: Vec<Check>| {
        let v = Verdict { id, name, checks };
        v.print();
        verdicts.push(v);
    };

    record(1, "rate limiting", outcome(bench_rate(&ctx, &RateParams::default()).map(|r| r.checks)));

    let backbone = BackboneParams {
        frames: 100,
        ..BackboneParams::default()
    };
    record(2, "backbone sharing", outcome(bench_backbone(&ctx, &backbone).map(|r| r.checks)));

    let parallel = ParallelParams {
        tasks: vec![1, 8],
        frames: 100,
        ..ParallelParams::default()
    };
    let parallel = outcome(bench_parallel(&ctx, &parallel).map(|r| r.checks));
    record(3, "parallel heads", pick(&parallel, &["speedup at n=8", "run"]));

    let serialized = SerializedParams {
        tasks: vec![1, 4, 8],
        frames: 100,
        ..SerializedParams::default()
    };
    record(4, "serialization ablation", outcome(bench_serialized(&ctx, &serialized).map(|r| r.checks)));

    let memory = outcome(bench_memory(&ctx, &MemoryParams::default()).map(|r| r.checks));
    record(
        5,
        "memory constancy",
        pick(&memory, &["constant footprint", "no post-init allocation", "affine in head count", "run"]),
    );

    record(6, "single-copy discipline", outcome(bench_copies(&ctx, 300).map(|r| r.checks)));
    record(7, "frame loss", pick(&memory, &["frame loss", "run"]));
    record(8, "ipc overhead", pick(&parallel, &["engine overhead", "run"]));
    record(9, "fault isolation", outcome(bench_fault(&ctx, &FaultParams::default()).map(|r| r.checks)));
    record(
        10,
        "channel property suite",
        outcome(bench_channels(&ctx, &ChannelSuiteParams::default()).map(|r| r.checks)),
    );

    let failed = verdicts.iter().filter(|v| !v.passed()).count();
    println!(
        "{} of {} criteria passed in {:.0} s",
        verdicts.len() - failed,
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
