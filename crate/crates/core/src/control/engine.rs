//! The coordinator: builds every shared region from a deployment, spawns
//! and supervises one process per worker, routes control commands and tears
//! everything down in order.

use std::collections::VecDeque;
use std::fs::File;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::channels::{create_channel, Channel, ChannelStats, SlotGroup};
use crate::clock::{log_event, monotonic_ns};
use crate::control::block::{ControlBlock, Counter, HeartbeatRecord, WorkerState, MAX_WORKERS};
use crate::control::config::Deployment;
use crate::control::protocol::{read_frame, write_frame, Command, Reply};
use crate::error::{Error, Result};
use crate::metrics::MergedMetrics;
use crate::pipeline::gate::Rate;
use crate::pipeline::worker::{MetricsBuffer, Role, SourcePlan, WorkerPlan};
use crate::shm::{self, audit};
use crate::tensor_arena::{create_arena, Arena, ArenaLayout, SlotRef, TensorSpec};
use crate::channels::MAX_CONSUMERS;

const SOURCE: u32 = 0;
const FOUNDATION: u32 = 1;
const FIRST_HEAD: u32 = 2;
const MISSED_BEATS: u32 = 3;
const MAX_RESTARTS_PER_MINUTE: usize = 3;

/// How to launch a worker process: `program args... --namespace ...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl WorkerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        WorkerCommand {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }
}

#[derive(Clone, Debug)]
pub struct EngineOptions {
    pub worker: WorkerCommand,
    /// The source waits for every head to finish a frame before the next.
    pub lockstep: bool,
    pub lockstep_timeout: Duration,
    /// Serialize all inference behind one cross-process token.
    pub exec_token: bool,
    pub pin_cpu: Option<usize>,
    pub startup_timeout: Duration,
    pub heartbeat_interval: Duration,
    pub stop_deadline: Duration,
    /// Overrides the config's restart policy.
    pub restart_policy: Option<bool>,
    /// Workers inherit standard error instead of logging to files.
    pub inherit_stderr: bool,
}

impl EngineOptions {
    pub fn new(worker: WorkerCommand) -> Self {
        EngineOptions {
            worker,
            lockstep: false,
            lockstep_timeout: Duration::from_secs(2),
            exec_token: false,
            pin_cpu: None,
            startup_timeout: Duration::from_secs(10),
            heartbeat_interval: Duration::from_millis(100),
            stop_deadline: Duration::from_secs(5),
            restart_policy: None,
            inherit_stderr: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WorkerStatus {
    pub name: String,
    pub role: Role,
    pub state: WorkerState,
    pub restarts: usize,
    pub record: HeartbeatRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChannelStatus {
    pub name: String,
    pub stats: ChannelStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct EngineStatus {
    pub namespace: String,
    pub uptime_ms: u64,
    pub workers: Vec<WorkerStatus>,
    pub channels: Vec<ChannelStatus>,
    /// Copies made by all workers (one per consumed label).
    pub copies: u64,
    /// Bytes of every shared region of the run.
    pub resident_bytes: u64,
    pub regions: usize,
    /// Shared regions created after initialization, by the coordinator and
    /// by workers that have finished.
    pub post_init_regions: u64,
    /// Output frames collected by the coordinator, per head.
    pub drained: Vec<(String, u64)>,
}

impl EngineStatus {
    pub fn worker(&self, name: &str) -> Option<&WorkerStatus> {
        self.workers.iter().find(|w| w.name == name)
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelStats> {
        self.channels.iter().find(|c| c.name == name).map(|c| &c.stats)
    }
}

#[derive(Debug)]
pub struct StopReport {
    pub status: EngineStatus,
    pub metrics: MergedMetrics,
    /// Every worker exited before the deadline and no region remains.
    pub clean: bool,
    pub elapsed: Duration,
}

struct WorkerEntry {
    name: String,
    role: Role,
    index: u32,
    card: String,
    plan_path: PathBuf,
    socket_path: PathBuf,
    listener: UnixListener,
    child: Option<Child>,
    failed: bool,
    stopped: bool,
    spawned_at: Instant,
    restarts: VecDeque<Instant>,
}

struct Shared {
    deployment: Deployment,
    options: EngineOptions,
    namespace: String,
    run_dir: PathBuf,
    block: ControlBlock,
    input: Channel,
    middle: Channel,
    outputs: Vec<Channel>,
    sinks: Vec<Arena>,
    workers: Mutex<Vec<WorkerEntry>>,
    conns: Vec<Mutex<Option<UnixStream>>>,
    shutdown: AtomicBool,
    drained: Vec<AtomicU64>,
    restart: bool,
    started: Instant,
    regions_at_init: u64,
}

pub struct Engine {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    stopped: bool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn private_arena(specs: &[TensorSpec], namespace: &str, name: &str) -> Result<(Arena, Vec<SlotRef>)> {
    let layout = ArenaLayout::new(specs.iter().cloned().enumerate().map(|(i, s)| (i as u32, s)).collect())?;
    let (arena, _) = create_arena(&layout, namespace, name)?;
    let slots = arena.slots().to_vec();
    Ok((arena, slots))
}

impl Engine {
    /// Creates every region, spawns source, foundation and heads, and waits
    /// until all report Running.
    pub fn start(deployment: Deployment, options: EngineOptions) -> Result<Engine> {
        let heads = deployment.heads.len();
        if heads > MAX_CONSUMERS || heads + FIRST_HEAD as usize > MAX_WORKERS {
            return Err(Error::Config(format!("at most {MAX_CONSUMERS} heads are supported")));
        }
        if options.lockstep && deployment.heads.iter().any(|h| h.rate != Rate::Unlimited) {
            return Err(Error::Config("lockstep runs need unlimited head rates".into()));
        }
        let namespace = if deployment.config.namespace.is_empty() {
            shm::new_namespace()
        } else {
            deployment.config.namespace.clone()
        };
        if shm::namespace_dir(&namespace).exists() {
            return Err(Error::AlreadyExists(format!(
                "namespace {namespace} has live or stale regions; clean it first"
            )));
        }
        match Self::build(deployment, options, namespace.clone()) {
            Ok(engine) => Ok(engine),
            Err(e) => {
                let _ = shm::remove_namespace(&namespace);
                Err(e)
            }
        }
    }

    fn build(deployment: Deployment, options: EngineOptions, namespace: String) -> Result<Engine> {
        let ns = namespace.as_str();
        let n = deployment.heads.len();
        let block = ControlBlock::create(ns)?;
        let (mut input, input_h) = create_channel(&deployment.input, ns, 1)?;
        input.register_consumer(1)?;
        let (mut middle, middle_h) = create_channel(&deployment.middle, ns, n)?;
        for i in 0..n {
            middle.register_consumer(i as u32 + 1)?;
        }
        let mut outputs = Vec::with_capacity(n);
        let mut output_handles = Vec::with_capacity(n);
        let mut sinks = Vec::with_capacity(n);
        for h in &deployment.heads {
            let (mut ch, handle) = create_channel(&h.output, ns, 1)?;
            ch.register_consumer(1)?;
            outputs.push(ch);
            output_handles.push(handle);
            sinks.push(private_arena(&h.output.specs, ns, &format!("sink-{}", h.name))?.0);
        }
        let (fm_arena, fm_slots) = private_arena(&deployment.foundation.input_specs, ns, "proc-foundation")?;
        let mut head_procs = Vec::with_capacity(n);
        for h in &deployment.heads {
            head_procs.push(private_arena(&h.card.input_specs, ns, &format!("proc-{}", h.name))?);
        }
        audit::mark_init_complete();

        let run_dir = std::env::temp_dir().join(format!("fanout-{ns}"));
        let _ = std::fs::remove_dir_all(&run_dir);
        std::fs::create_dir_all(&run_dir)?;

        let frames = deployment.config.input.frames;
        let metrics_capacity = frames.map(|f| f as usize + 16).unwrap_or(1 << 18);
        let head_indices: Vec<u32> = (0..n as u32).map(|i| FIRST_HEAD + i).collect();
        let base = |role, name: &str, index, output| WorkerPlan {
            namespace: namespace.clone(),
            role,
            name: name.to_string(),
            index,
            card: None,
            input: None,
            output,
            consumer_id: 0,
            proc_arena: None,
            proc_slots: Vec::new(),
            rate: Rate::Unlimited,
            source: None,
            exec_token: false,
            pin_cpu: options.pin_cpu,
            metrics_path: Some(run_dir.join(format!("{name}.metrics.csv"))),
            metrics_capacity,
        };
        let mut plans = Vec::with_capacity(n + 2);
        let mut source = base(Role::Source, "source", SOURCE, input_h.clone());
        source.source = Some(SourcePlan {
            rate_hz: deployment.config.input.rate_hz,
            frames,
            lockstep: options.lockstep,
            heads: head_indices.clone(),
            lockstep_timeout_ms: options.lockstep_timeout.as_millis() as u64,
            peers: std::iter::once(FOUNDATION).chain(head_indices.iter().copied()).collect(),
            startup_timeout_ms: options.startup_timeout.as_millis() as u64,
        });
        plans.push(source);
        let mut fm = base(Role::Foundation, "foundation", FOUNDATION, middle_h.clone());
        fm.card = Some(deployment.foundation.clone());
        fm.input = Some(input_h);
        fm.consumer_id = 1;
        fm.proc_arena = Some(fm_arena.handle().clone());
        fm.proc_slots = fm_slots;
        fm.exec_token = options.exec_token;
        plans.push(fm);
        for (i, h) in deployment.heads.iter().enumerate() {
            let mut p = base(Role::Head, &h.name, FIRST_HEAD + i as u32, output_handles[i].clone());
            p.card = Some(h.card.clone());
            p.input = Some(middle_h.clone());
            p.consumer_id = i as u32 + 1;
            p.proc_arena = Some(head_procs[i].0.handle().clone());
            p.proc_slots = head_procs[i].1.clone();
            p.rate = h.rate;
            p.exec_token = options.exec_token;
            plans.push(p);
        }

        let mut entries = Vec::with_capacity(plans.len());
        for plan in &plans {
            let plan_path = run_dir.join(format!("{}.plan.json", plan.name));
            plan.save(&plan_path)?;
            let socket_path = run_dir.join(format!("{}.sock", plan.name));
            let listener = UnixListener::bind(&socket_path)?;
            listener.set_nonblocking(true)?;
            entries.push(WorkerEntry {
                name: plan.name.clone(),
                role: plan.role,
                index: plan.index,
                card: plan.card.as_ref().map(|c| c.name.clone()).unwrap_or_else(|| "-".into()),
                plan_path,
                socket_path,
                listener,
                child: None,
                failed: false,
                stopped: false,
                spawned_at: Instant::now(),
                restarts: VecDeque::new(),
            });
        }
        let restart = options.restart_policy.unwrap_or(deployment.config.restart_policy);
        let shared = Arc::new(Shared {
            conns: (0..entries.len()).map(|_| Mutex::new(None)).collect(),
            drained: (0..n).map(|_| AtomicU64::new(0)).collect(),
            workers: Mutex::new(entries),
            deployment,
            options,
            namespace,
            run_dir,
            block,
            input,
            middle,
            outputs,
            sinks,
            shutdown: AtomicBool::new(false),
            restart,
            started: Instant::now(),
            regions_at_init: audit::regions_created(),
        });
        let mut engine = Engine {
            shared,
            threads: Vec::new(),
            stopped: false,
        };
        if let Err(e) = engine.spawn_all() {
            engine.abort();
            return Err(match e {
                Error::Startup(m) => Error::Startup(m),
                other => Error::Startup(other.to_string()),
            });
        }
        let supervisor = {
            let shared = engine.shared.clone();
            std::thread::Builder::new()
                .name("supervisor".into())
                .spawn(move || supervise(&shared))?
        };
        let drain = {
            let shared = engine.shared.clone();
            std::thread::Builder::new()
                .name("drain".into())
                .spawn(move || drain_outputs(&shared))?
        };
        engine.threads = vec![supervisor, drain];
        log_event("coordinator", "running", &engine.shared.namespace);
        Ok(engine)
    }

    fn spawn_all(&mut self) -> Result<()> {
        let shared = &self.shared;
        let mut workers = lock(&shared.workers);
        // Heads first so the foundation and source never outrun them.
        let order: Vec<usize> = (FIRST_HEAD as usize..workers.len()).chain([1, 0]).collect();
        for i in order {
            spawn_worker(shared, &mut workers[i])?;
        }
        let deadline = Instant::now() + shared.options.startup_timeout;
        loop {
            let mut all_up = true;
            for w in workers.iter_mut() {
                if let Some(status) = w.child.as_mut().and_then(|c| c.try_wait().ok().flatten()) {
                    return Err(Error::Startup(format!("worker {} exited during startup: {status}", w.name)));
                }
                all_up &= matches!(shared.block.state(w.index), WorkerState::Running | WorkerState::Paused);
            }
            if all_up {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(Error::Startup("workers did not reach Running before the startup timeout".into()));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Kills everything and removes all shared state.
    fn abort(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        for w in lock(&self.shared.workers).iter_mut() {
            if let Some(mut c) = w.child.take() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
        let _ = shm::remove_namespace(&self.shared.namespace);
        let _ = std::fs::remove_dir_all(&self.shared.run_dir);
        self.stopped = true;
    }

    pub fn namespace(&self) -> &str {
        &self.shared.namespace
    }

    pub fn deployment(&self) -> &Deployment {
        &self.shared.deployment
    }

    pub fn run_dir(&self) -> &Path {
        &self.shared.run_dir
    }

    pub fn worker_names(&self) -> Vec<String> {
        lock(&self.shared.workers).iter().map(|w| w.name.clone()).collect()
    }

    pub fn record(&self, name: &str) -> Option<HeartbeatRecord> {
        let index = lock(&self.shared.workers).iter().find(|w| w.name == name)?.index;
        Some(self.shared.block.snapshot(index))
    }

    pub fn pid(&self, name: &str) -> Option<u32> {
        lock(&self.shared.workers)
            .iter()
            .find(|w| w.name == name)?
            .child
            .as_ref()
            .map(|c| c.id())
    }

    /// Sends a raw signal to a worker process (fault-injection hook).
    pub fn signal_worker(&self, name: &str, signal: i32) -> Result<()> {
        let pid = self
            .pid(name)
            .ok_or_else(|| Error::NotFound(format!("worker {name}")))?;
        // SAFETY: plain syscall on a child pid we own.
        if unsafe { libc::kill(pid as libc::pid_t, signal) } != 0 {
            return Err(std::io::Error::last_os_error().into());
        }
        Ok(())
    }

    pub fn status(&self) -> EngineStatus {
        status_of(&self.shared)
    }

    /// True once the source has emitted every configured frame and the
    /// foundation has published the last one it received.
    pub fn source_done(&self) -> bool {
        let Some(frames) = self.shared.deployment.config.input.frames else {
            return false;
        };
        let block = &self.shared.block;
        block.counter(SOURCE, Counter::LastOutputFrame) >= frames
    }

    /// Waits until the source finished and every head's counters stopped
    /// moving for `settle`. False on timeout.
    pub fn wait_complete(&self, settle: Duration, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.source_done() {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let block = &self.shared.block;
        let indices: Vec<u32> = (FOUNDATION..FIRST_HEAD + self.shared.deployment.heads.len() as u32).collect();
        let snapshot = || -> Vec<u64> {
            indices
                .iter()
                .flat_map(|&i| [block.counter(i, Counter::Iterations), block.counter(i, Counter::Outputs)])
                .collect()
        };
        let mut last = snapshot();
        let mut stable_since = Instant::now();
        loop {
            std::thread::sleep(Duration::from_millis(10));
            let now = snapshot();
            if now != last {
                last = now;
                stable_since = Instant::now();
            } else if stable_since.elapsed() >= settle {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
        }
    }

    /// Parses and dispatches one textual command.
    pub fn dispatch_text(&mut self, text: &str) -> Reply {
        match Command::decode(text) {
            Ok(cmd) => self.dispatch(cmd),
            Err(e) => Reply::from_error(&e),
        }
    }

    pub fn dispatch(&mut self, cmd: Command) -> Reply {
        match cmd {
            Command::Stop => match self.stop() {
                Ok(report) => Reply::Ok(if report.clean { "clean" } else { "unclean" }.into()),
                Err(e) => Reply::from_error(&e),
            },
            _ if self.stopped => Reply::Err {
                code: "ShuttingDown".into(),
                detail: "engine is stopped".into(),
            },
            Command::Stats => match serde_json::to_string(&self.status()) {
                Ok(body) => Reply::Ok(body),
                Err(e) => Reply::from_error(&Error::Protocol(e.to_string())),
            },
            cmd => forward(&self.shared, &cmd),
        }
    }

    pub fn set_rate(&mut self, head: &str, rate: Rate) -> Result<()> {
        reply_result(self.dispatch(Command::SetRate(head.to_string(), rate)))
    }

    /// Ordered shutdown: source, foundation, heads; then merge metrics and
    /// remove every shared region.
    pub fn stop(&mut self) -> Result<StopReport> {
        if self.stopped {
            return Err(Error::Protocol("engine already stopped".into()));
        }
        let started = Instant::now();
        let shared = self.shared.clone();
        // Supervisor first, so expected exits are not reported as failures.
        shared.shutdown.store(true, Ordering::SeqCst);
        let drain = self.threads.pop();
        if let Some(supervisor) = self.threads.pop() {
            let _ = supervisor.join();
        }
        let deadline = started + shared.options.stop_deadline;
        let mut all_clean = true;
        {
            let mut workers = lock(&shared.workers);
            let n = workers.len();
            let groups: [Vec<usize>; 3] = [vec![0], vec![1], (FIRST_HEAD as usize..n).collect()];
            for group in groups {
                for &i in &group {
                    if !workers[i].failed {
                        let _ = send(&shared, i, &Command::Stop, Duration::from_millis(500));
                    }
                }
                for &i in &group {
                    let w = &mut workers[i];
                    let Some(child) = w.child.as_mut() else { continue };
                    loop {
                        if child.try_wait().ok().flatten().is_some() {
                            break;
                        }
                        if Instant::now() >= deadline {
                            log_event("coordinator", "stop_timeout", &w.name);
                            let _ = child.kill();
                            let _ = child.wait();
                            all_clean = false;
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    w.child = None;
                    if !w.failed {
                        w.stopped = true;
                    }
                }
            }
        }
        if let Some(d) = drain {
            let _ = d.join();
        }
        drain_once(&shared);
        let status = status_of(&shared);
        let metrics = merge_metrics(&shared);
        if let Some(path) = &shared.deployment.config.metrics_path {
            if let Err(e) = metrics.write_csv(path) {
                log_event("coordinator", "metrics_error", &e.to_string());
            }
        }
        let removed = shm::remove_namespace(&shared.namespace)?;
        let _ = std::fs::remove_dir_all(&shared.run_dir);
        let clean = all_clean && removed && !shm::namespace_dir(&shared.namespace).exists();
        self.stopped = true;
        log_event("coordinator", "stopped", if clean { "clean" } else { "unclean" });
        Ok(StopReport {
            status,
            metrics,
            clean,
            elapsed: started.elapsed(),
        })
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if !self.stopped {
            self.abort();
        }
    }
}

fn reply_result(reply: Reply) -> Result<()> {
    match reply {
        Reply::Ok(_) => Ok(()),
        Reply::Err { code, detail } => Err(match code.as_str() {
            "NotFound" => Error::NotFound(detail),
            "ConfigError" => Error::Config(detail),
            _ => Error::Protocol(format!("{code}: {detail}")),
        }),
    }
}

fn spawn_worker(shared: &Shared, w: &mut WorkerEntry) -> Result<()> {
    let opts = &shared.options;
    let stderr = if opts.inherit_stderr {
        Stdio::inherit()
    } else {
        let log = File::options()
            .create(true)
            .append(true)
            .open(shared.run_dir.join(format!("{}.log", w.name)))?;
        Stdio::from(log)
    };
    let child = Process::new(&opts.worker.program)
        .args(&opts.worker.args)
        .arg("--namespace")
        .arg(&shared.namespace)
        .arg("--role")
        .arg(w.role.as_str())
        .arg("--card")
        .arg(&w.card)
        .arg("--control")
        .arg(&w.socket_path)
        .arg("--plan")
        .arg(&w.plan_path)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(stderr)
        .spawn()
        .map_err(|e| Error::Startup(format!("spawn {}: {e}", w.name)))?;
    w.child = Some(child);
    w.spawned_at = Instant::now();
    w.failed = false;

    let deadline = Instant::now() + opts.startup_timeout;
    let stream = loop {
        match w.listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if let Some(status) = w.child.as_mut().and_then(|c| c.try_wait().ok().flatten()) {
                    return Err(Error::Startup(format!("worker {} exited before connecting: {status}", w.name)));
                }
                if Instant::now() >= deadline {
                    return Err(Error::Startup(format!("worker {} never connected", w.name)));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    *lock(&shared.conns[w.index as usize]) = Some(stream);
    log_event("coordinator", "spawned", &format!("{} pid {}", w.name, w.child.as_ref().unwrap().id()));
    Ok(())
}

/// Request/response over one worker's control socket.
fn send(shared: &Shared, index: usize, cmd: &Command, timeout: Duration) -> Result<Reply> {
    let mut conn = lock(&shared.conns[index]);
    let stream = conn
        .as_mut()
        .ok_or_else(|| Error::NotFound(format!("no control connection for worker {index}")))?;
    stream.set_read_timeout(Some(timeout))?;
    write_frame(stream, &cmd.encode())?;
    match read_frame(stream)? {
        Some(text) => Reply::decode(&text),
        None => Err(Error::Protocol("worker closed its control socket".into())),
    }
}

fn forward(shared: &Shared, cmd: &Command) -> Reply {
    let head = cmd.head().unwrap_or_default();
    let index = {
        let workers = lock(&shared.workers);
        match workers.iter().find(|w| w.role == Role::Head && w.name == head) {
            Some(w) if !w.failed && !w.stopped => w.index as usize,
            Some(_) => return Reply::from_error(&Error::NotFound(format!("head {head} is not alive"))),
            None => return Reply::from_error(&Error::NotFound(format!("head {head}"))),
        }
    };
    if let Command::SetRate(_, rate) = cmd {
        if let Err(e) = rate.validate() {
            return Reply::from_error(&e);
        }
    }
    match send(shared, index, cmd, Duration::from_secs(5)) {
        Ok(reply) => reply,
        Err(e) => Reply::from_error(&e),
    }
}

fn status_of(shared: &Shared) -> EngineStatus {
    let workers: Vec<WorkerStatus> = lock(&shared.workers)
        .iter()
        .map(|w| {
            let state = if w.failed {
                WorkerState::Failed
            } else if w.stopped {
                WorkerState::Stopped
            } else {
                shared.block.state(w.index)
            };
            WorkerStatus {
                name: w.name.clone(),
                role: w.role,
                state,
                restarts: w.restarts.len(),
                record: shared.block.snapshot(w.index),
            }
        })
        .collect();
    let mut channels = vec![
        ChannelStatus { name: "input".into(), stats: shared.input.stats() },
        ChannelStatus { name: "middle".into(), stats: shared.middle.stats() },
    ];
    for ch in &shared.outputs {
        channels.push(ChannelStatus { name: ch.name().to_string(), stats: ch.stats() });
    }
    let (regions, resident_bytes) = shm::namespace_footprint(&shared.namespace).unwrap_or((0, 0));
    let post_init_regions = audit::regions_created().saturating_sub(shared.regions_at_init)
        + workers.iter().map(|w| w.record.post_init_allocs).sum::<u64>();
    EngineStatus {
        namespace: shared.namespace.clone(),
        uptime_ms: shared.started.elapsed().as_millis() as u64,
        copies: workers.iter().map(|w| w.record.copies).sum(),
        workers,
        channels,
        resident_bytes,
        regions,
        post_init_regions,
        drained: shared
            .deployment
            .heads
            .iter()
            .zip(&shared.drained)
            .map(|(h, d)| (h.name.clone(), d.load(Ordering::Acquire)))
            .collect(),
    }
}

fn mark_failed(shared: &Shared, w: &mut WorkerEntry, why: &str) {
    if let Some(mut child) = w.child.take() {
        let _ = child.kill();
        let _ = child.wait();
    }
    w.failed = true;
    shared.block.set_state(w.index, WorkerState::Failed);
    *lock(&shared.conns[w.index as usize]) = None;
    // Return a lease the dead worker may still hold.
    let leased = shared.block.counter(w.index, Counter::LeasedSlot);
    if leased > 0 {
        let channel = if w.role == Role::Head { &shared.middle } else { &shared.input };
        channel.release_abandoned(leased as usize - 1);
        shared.block.set(w.index, Counter::LeasedSlot, 0);
    }
    shared.block.release_token_of(w.index);
    shared.block.ring_progress();
    log_event("coordinator", "worker_failed", &format!("{}: {why}", w.name));
}

fn supervise(shared: &Shared) {
    let interval = shared.options.heartbeat_interval;
    let limit = interval.as_nanos() as u64 * MISSED_BEATS as u64;
    while !shared.shutdown.load(Ordering::SeqCst) {
        std::thread::sleep(interval / 2);
        let mut workers = lock(&shared.workers);
        for w in workers.iter_mut() {
            if w.stopped {
                continue;
            }
            if w.failed {
                maybe_restart(shared, w);
                continue;
            }
            let exited = w.child.as_mut().and_then(|c| c.try_wait().ok().flatten());
            if let Some(status) = exited {
                mark_failed(shared, w, &format!("exited with {status}"));
                continue;
            }
            let state = shared.block.state(w.index);
            let starting = state == WorkerState::Starting && w.spawned_at.elapsed() < shared.options.startup_timeout;
            let last_seen = shared.block.counter(w.index, Counter::LastSeen);
            if !starting && monotonic_ns().saturating_sub(last_seen) > limit {
                mark_failed(shared, w, "missed heartbeats");
            }
        }
    }
}

fn maybe_restart(shared: &Shared, w: &mut WorkerEntry) {
    if !shared.restart {
        return;
    }
    let now = Instant::now();
    while w.restarts.front().is_some_and(|t| now.duration_since(*t) > Duration::from_secs(60)) {
        w.restarts.pop_front();
    }
    if w.restarts.len() >= MAX_RESTARTS_PER_MINUTE {
        return;
    }
    w.restarts.push_back(now);
    shared.block.set_state(w.index, WorkerState::Starting);
    shared.block.heartbeat(w.index);
    match spawn_worker(shared, w) {
        Ok(()) => log_event("coordinator", "restarted", &w.name),
        Err(e) => {
            w.failed = true;
            shared.block.set_state(w.index, WorkerState::Failed);
            log_event("coordinator", "restart_failed", &format!("{}: {e}", w.name));
        }
    }
}

fn drain_once(shared: &Shared) -> bool {
    let mut any = false;
    for (i, (ch, sink)) in shared.outputs.iter().zip(&shared.sinks).enumerate() {
        let group = SlotGroup::new(sink, sink.slots());
        while ch.pop_fifo(1, &group, false).is_ok() {
            shared.drained[i].fetch_add(1, Ordering::AcqRel);
            any = true;
        }
    }
    any
}

fn drain_outputs(shared: &Shared) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        if !drain_once(shared) {
            std::thread::sleep(Duration::from_millis(2));
        }
    }
}

fn merge_metrics(shared: &Shared) -> MergedMetrics {
    let rows = |name: &str| {
        MetricsBuffer::read_csv(&shared.run_dir.join(format!("{name}.metrics.csv"))).unwrap_or_default()
    };
    let heads: Vec<(String, Vec<_>)> = shared
        .deployment
        .heads
        .iter()
        .map(|h| (h.name.clone(), rows(&h.name)))
        .collect();
    MergedMetrics::merge(&rows("source"), &rows("foundation"), &heads)
}
