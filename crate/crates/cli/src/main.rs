use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fanout::bench::backbone::{bench_backbone, BackboneParams};
use fanout::bench::fault::{bench_fault, FaultParams};
use fanout::bench::integrity::{bench_channels, bench_copies, ChannelSuiteParams};
use fanout::bench::memory::{bench_memory, MemoryParams};
use fanout::bench::parallel::{bench_parallel, ParallelParams};
use fanout::bench::rate::{bench_rate, RateParams};
use fanout::bench::serialized::{bench_serialized, SerializedParams};
use fanout::bench::{BenchContext, BenchReport};
use fanout_core::control::config::{Deployment, EngineConfig};
use fanout_core::control::engine::{Engine, EngineOptions, WorkerCommand};
use fanout_core::registry::{validate_deployment, ModelCard, Registry};
use fanout_core::{demo, shm, Error, Result};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "fanout", version, about = "Shared-memory foundation/head pipeline runner and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many seconds; default runs until the input ends or Ctrl-C.
        #[arg(long)]
        duration: Option<f64>,
        /// Let workers write their logs to this terminal.
        #[arg(long)]
        worker_logs: bool,
    },
    /// Run a benchmark scenario and check its acceptance bounds.
    Bench {
        scenario: Scenario,
        #[command(flatten)]
        opts: BenchOpts,
    },
    /// Manage model cards.
    Registry {
        #[arg(long, default_value = "registry")]
        registry: PathBuf,
        #[command(subcommand)]
        command: RegistryCommand,
    },
    /// Remove the shared regions of a namespace left behind by a crashed run.
    Clean {
        #[arg(long)]
        namespace: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Backbone,
    Parallel,
    Serialized,
    Rate,
    Memory,
    Fault,
    Copies,
    Channels,
}

#[derive(Args)]
struct BenchOpts {
    /// Largest task count; rows cover 1..=N.
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    frames: Option<u64>,
    /// Write the result rows as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rates in Hz for the rate scenario, comma separated.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    /// Suppress progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// Register card JSON files, or the demo cards.
    Register {
        cards: Vec<PathBuf>,
        #[arg(long)]
        demo: bool,
    },
    /// List cards and their versions.
    List,
    /// Check that heads can consume what the foundation emits.
    Validate {
        /// Validate the cards a config refers to.
        #[arg(long, conflicts_with_all = ["foundation", "heads"])]
        config: Option<PathBuf>,
        #[arg(long)]
        foundation: Option<String>,
        heads: Vec<String>,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if argv.get(1).map(String::as_str) == Some("worker") {
        let code = fanout_core::pipeline::worker::worker_main(&argv[2..]);
        return ExitCode::from(code.clamp(0, 255) as u8);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::CorruptCard(_) | Error::Label(_) => EXIT_CONFIG,
        _ => EXIT_FAILED,
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run {
            config,
            duration,
            worker_logs,
        } => run(&config, duration, worker_logs),
        Command::Bench { scenario, opts } => bench(scenario, &opts),
        Command::Registry { registry, command } => registry_command(&registry, command),
        Command::Clean { namespace } => {
            shm::validate_name("namespace", &namespace)?;
            if shm::remove_namespace(&namespace)? {
                println!("removed {}", shm::namespace_dir(&namespace).display());
            } else {
                println!("nothing to remove for {namespace}");
            }
            Ok(0)
        }
    }
}

fn worker_command() -> Result<WorkerCommand> {
    Ok(WorkerCommand::new(std::env::current_exe()?).arg("worker"))
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_interrupt(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn catch_interrupts() {
    let handler = on_interrupt as extern "C" fn(libc::c_int);
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe.
    unsafe {
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
    }
}

fn run(config: &Path, duration: Option<f64>, worker_logs: bool) -> Result<u8> {
    let cfg = EngineConfig::load(config)?;
    let deployment = Deployment::resolve(&cfg)?;
    let heads: Vec<String> = deployment.heads.iter().map(|h| h.name.clone()).collect();
    let mut opts = EngineOptions::new(worker_command()?);
    opts.inherit_stderr = worker_logs;
    catch_interrupts();
    let mut engine = Engine::start(deployment, opts)?;
    println!("namespace {}", engine.namespace());
    let started = Instant::now();
    let limit = duration.map(Duration::from_secs_f64);
    let mut last: Vec<u64> = vec![0; heads.len()];
    let mut tick = 1u64;
    loop {
        let next = started + Duration::from_secs(tick);
        while Instant::now() < next {
            if INTERRUPTED.load(Ordering::SeqCst) {
                break;
            }
            std::thread::sleep(Duration::from_millis(20).min(next.saturating_duration_since(Instant::now())));
        }
        if INTERRUPTED.load(Ordering::SeqCst) {
            break;
        }
        let status = engine.status();
        let line: Vec<String> = heads
            .iter()
            .zip(last.iter_mut())
            .map(|(h, prev)| match status.worker(h) {
                Some(w) => {
                    let hz = w.record.outputs.saturating_sub(*prev);
                    *prev = w.record.outputs;
                    format!("{h}={hz}Hz({:?})", w.state)
                }
                None => format!("{h}=?"),
            })
            .collect();
        println!("t={tick}s {}", line.join(" "));
        tick += 1;
        if limit.is_some_and(|l| started.elapsed() >= l) {
            break;
        }
        if engine.source_done() && engine.wait_complete(Duration::from_millis(300), Duration::from_secs(5)) {
            break;
        }
    }
    let report = engine.stop()?;
    for w in &report.status.workers {
        println!(
            "{} {:?}: consumed {}, outputs {}, restarts {}",
            w.name, w.state, w.record.consumed, w.record.outputs, w.restarts
        );
    }
    if let Some(path) = &cfg.metrics_path {
        println!("metrics written to {}", path.display());
    }
    println!("stopped {} in {:.2} s", if report.clean { "cleanly" } else { "uncleanly" }, report.elapsed.as_secs_f64());
    Ok(if report.clean { 0 } else { EXIT_FAILED })
}

fn tasks(opts: &BenchOpts, default: Vec<usize>) -> Vec<usize> {
    opts.tasks.map(|n| (1..=n).collect()).unwrap_or(default)
}

fn finish<R: Serialize>(report: BenchReport<R>, out: Option<&Path>) -> Result<u8> {
    print_table(&report.rows)?;
    if let Some(path) = out {
        report.write_csv(path)?;
        println!("wrote {}", path.display());
    }
    for c in &report.checks {
        println!("{c}");
    }
    Ok(if report.passed() { 0 } else { EXIT_FAILED })
}

fn print_table<R: Serialize>(rows: &[R]) -> Result<()> {
    let json = |e: serde_json::Error| Error::Protocol(e.to_string());
    let mut header: Vec<String> = Vec::new();
    let mut cells: Vec<Vec<String>> = Vec::new();
    for row in rows {
        let serde_json::Value::Object(map) = serde_json::to_value(row).map_err(json)? else {
            continue;
        };
        if header.is_empty() {
            header = map.keys().cloned().collect();
        }
        cells.push(
            header
                .iter()
                .map(|k| match &map[k] {
                    serde_json::Value::Number(n) if n.is_f64() => format!("{:.3}", n.as_f64().unwrap_or(f64::NAN)),
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    if !header.is_empty() {
        println!("{}", fmt(&header));
    }
    for r in &cells {
        println!("{}", fmt(r));
    }
    Ok(())
}

fn bench(scenario: Scenario, opts: &BenchOpts) -> Result<u8> {
    let mut ctx = BenchContext::new(worker_command()?);
    ctx.verbose = !opts.quiet;
    let out = opts.out.as_deref();
    match scenario {
        Scenario::Backbone => {
            let d = BackboneParams::default();
            let p = BackboneParams {
                tasks: tasks(opts, d.tasks.clone()),
                frames: opts.frames.unwrap_or(d.frames),
                ..d
            };
            finish(bench_backbone(&ctx, &p)?, out)
        }
        Scenario::Parallel => {
            let d = ParallelParams::default();
            let p = ParallelParams {
                tasks: tasks(opts, d.tasks.clone()),
                frames: opts.frames.unwrap_or(d.frames),
                ..d
            };
            finish(bench_parallel(&ctx, &p)?, out)
        }
        Scenario::Serialized => {
            let d = SerializedParams::default();
            let p = SerializedParams {
                tasks: tasks(opts, d.tasks.clone()),
                frames: opts.frames.unwrap_or(d.frames),
                ..d
            };
            finish(bench_serialized(&ctx, &p)?, out)
        }
        Scenario::Rate => {
            let d = RateParams::default();
            let p = RateParams {
                rates: opts.rates.clone().unwrap_or(d.rates.clone()),
                ..d
            };
            finish(bench_rate(&ctx, &p)?, out)
        }
        Scenario::Memory => {
            let d = MemoryParams::default();
            let p = MemoryParams {
                frames: opts.frames.unwrap_or(d.frames),
                heads: tasks(opts, d.heads.clone()),
                ..d
            };
            finish(bench_memory(&ctx, &p)?, out)
        }
        Scenario::Fault => finish(bench_fault(&ctx, &FaultParams::default())?, out),
        Scenario::Copies => finish(bench_copies(&ctx, opts.frames.unwrap_or(300))?, out),
        Scenario::Channels => {
            let d = ChannelSuiteParams::default();
            let p = ChannelSuiteParams {
                stress_frames: opts.frames.unwrap_or(d.stress_frames),
                ..d
            };
            finish(bench_channels(&ctx, &p)?, out)
        }
    }
}

fn read_card(path: &Path) -> Result<ModelCard> {
    let text = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| Error::CorruptCard(format!("{}: {e}", path.display())))
}

fn registry_command(root: &Path, command: RegistryCommand) -> Result<u8> {
    match command {
        RegistryCommand::Register { cards, demo } => {
            if cards.is_empty() && !demo {
                return Err(Error::Config("nothing to register: pass card files or --demo".into()));
            }
            std::fs::create_dir_all(root)?;
            let registry = Registry::open(root)?;
            if demo {
                demo::register_demo(&registry)?;
                println!("demo cards registered in {}", root.display());
            }
            for path in &cards {
                let card = read_card(path)?;
                let version = registry.register(&card)?;
                println!("{}@{version}", card.name);
            }
            Ok(0)
        }
        RegistryCommand::List => {
            let registry = Registry::open(root)?;
            for (name, versions) in registry.list()? {
                let v: Vec<String> = versions.iter().map(u64::to_string).collect();
                println!("{name}: {}", v.join(", "));
            }
            Ok(0)
        }
        RegistryCommand::Validate {
            config,
            foundation,
            heads,
        } => {
            let (fm, head_cards) = match config {
                Some(path) => {
                    let cfg = EngineConfig::load(&path)?;
                    let d = Deployment::resolve(&cfg)?;
                    (d.foundation, d.heads.into_iter().map(|h| h.card).collect::<Vec<_>>())
                }
                None => {
                    let registry = Registry::open(root)?;
                    let fm = foundation.ok_or_else(|| Error::Config("--foundation or --config is required".into()))?;
                    let fm = registry.resolve(&fm)?;
                    let heads = heads.iter().map(|h| registry.resolve(h)).collect::<Result<Vec<_>>>()?;
                    (fm, heads)
                }
            };
            let report = validate_deployment(&fm, &head_cards);
            for head in &report.heads {
                for l in &head.labels {
                    match &l.mismatch {
                        None => println!("{} <- {}: ok", head.head, l.label),
                        Some(m) => println!("{} <- {}: {m}", head.head, l.label),
                    }
                }
            }
            if report.is_valid() {
                println!("valid");
                Ok(0)
            } else {
                Ok(EXIT_CONFIG)
            }
        }
    }
}
