//! Worker processes: the frame source, the foundation worker and head
//! workers. Each runs one single-threaded loop over its channel endpoints,
//! heartbeats into the control block and polls its control socket once per
//! iteration.

use std::io::{ErrorKind, Read, Write as _};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::channels::{open_channel, Channel, ChannelHandle, PushOutcome, SlotGroup};
use crate::clock::{log_event, monotonic_ns};
use crate::control::block::{ControlBlock, Counter, WorkerState};
use crate::control::protocol::{write_frame, Command, FrameBuffer, Reply};
use crate::error::{Error, Result};
use crate::pipeline::backend::{build_backend, fill_pattern, ComputeBackend};
use crate::pipeline::gate::{Rate, RateGate};
use crate::pipeline::transform::{apply_transform, build_chain, Transform, TransformKind};
use crate::registry::ModelCard;
use crate::shm::audit;
use crate::tensor_arena::{self, import_arena, Arena, ShareHandle, SlotRef, TensorSpec};

/// Longest a loop blocks before it heartbeats and polls control again.
pub const POLL_INTERVAL: Duration = Duration::from_millis(20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Foundation,
    Head,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Foundation => "foundation",
            Role::Head => "head",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Role> {
        match s {
            "source" => Ok(Role::Source),
            "foundation" => Ok(Role::Foundation),
            "head" => Ok(Role::Head),
            _ => Err(Error::Config(format!("unknown role {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePlan {
    /// 0 means unpaced.
    pub rate_hz: f64,
    pub frames: Option<u64>,
    /// Wait for every live head to finish frame `f` before emitting `f + 1`.
    pub lockstep: bool,
    /// Control-block indices of the heads to wait for.
    pub heads: Vec<u32>,
    pub lockstep_timeout_ms: u64,
    /// Workers that must leave `Starting` before the first frame.
    pub peers: Vec<u32>,
    pub startup_timeout_ms: u64,
}

/// Everything a worker needs beyond its startup parameters. Written by the
/// coordinator before spawn; every shared region it names already exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerPlan {
    pub namespace: String,
    pub role: Role,
    pub name: String,
    /// Record index in the control block.
    pub index: u32,
    pub card: Option<ModelCard>,
    pub input: Option<ChannelHandle>,
    pub output: ChannelHandle,
    pub consumer_id: u32,
    pub proc_arena: Option<ShareHandle>,
    /// Processing slots, one per consumed label, in consumption order.
    pub proc_slots: Vec<SlotRef>,
    pub rate: Rate,
    pub source: Option<SourcePlan>,
    /// Hold the global execution token around every inference.
    pub exec_token: bool,
    pub pin_cpu: Option<usize>,
    pub metrics_path: Option<PathBuf>,
    pub metrics_capacity: usize,
}

impl WorkerPlan {
    pub fn load(path: &Path) -> Result<WorkerPlan> {
        let text = std::fs::read(path)?;
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// One per-frame timing row. For the source `t0`/`t1` bracket the push; for
/// model workers they are the frame's capture time and the publish time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRow {
    pub frame_id: u64,
    pub t0: u64,
    pub t1: u64,
    pub backend_ns: u64,
}

pub const METRICS_HEADER: &str = "frame_id,t0,t1,backend_ns";

/// Preallocated, append-only per-process metrics buffer.
#[derive(Debug)]
pub struct MetricsBuffer {
    rows: Vec<MetricRow>,
    overflow: u64,
}

impl MetricsBuffer {
    pub fn with_capacity(n: usize) -> Self {
        MetricsBuffer {
            rows: Vec::with_capacity(n),
            overflow: 0,
        }
    }

    pub fn push(&mut self, row: MetricRow) {
        if self.rows.len() < self.rows.capacity() {
            self.rows.push(row);
        } else {
            self.overflow += 1;
        }
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(32 * self.rows.len() + 32);
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.frame_id, r.t0, r.t1, r.backend_ns));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                let v: Vec<u64> = l
                    .split(',')
                    .map(|x| x.parse().map_err(|_| Error::Protocol(format!("bad metrics row {l:?}"))))
                    .collect::<Result<_>>()?;
                match v.as_slice() {
                    [frame_id, t0, t1, backend_ns] => Ok(MetricRow {
                        frame_id: *frame_id,
                        t0: *t0,
                        t1: *t1,
                        backend_ns: *backend_ns,
                    }),
                    _ => Err(Error::Protocol(format!("bad metrics row {l:?}"))),
                }
            })
            .collect()
    }
}

/// A chain of transforms with preallocated intermediate buffers.
struct Chain {
    transforms: Vec<Transform>,
    scratch: Vec<Vec<Vec<u8>>>,
}

impl Chain {
    fn new(kinds: &[TransformKind], inputs: &[TensorSpec]) -> Result<Chain> {
        let transforms = build_chain(kinds, inputs)?;
        let n = transforms.len().saturating_sub(1);
        let scratch = transforms[..n]
            .iter()
            .map(|t| t.output_specs.iter().map(|s| vec![0u8; s.byte_size()]).collect())
            .collect();
        Ok(Chain { transforms, scratch })
    }

    fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    fn run(&mut self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> Result<()> {
        let last = self.transforms.len() - 1;
        for i in 0..=last {
            let (done, rest) = self.scratch.split_at_mut(i);
            let src: Vec<&[u8]> = if i == 0 {
                inputs.to_vec()
            } else {
                done[i - 1].iter().map(|b| b.as_slice()).collect()
            };
            if i == last {
                apply_transform(&self.transforms[i], &src, outputs)?;
            } else {
                let mut dst: Vec<&mut [u8]> = rest[0].iter_mut().map(|b| b.as_mut_slice()).collect();
                apply_transform(&self.transforms[i], &src, &mut dst)?;
            }
        }
        Ok(())
    }
}

/// A card's full compute path: preprocess, backend, postprocess.
pub struct ModelStage {
    pre: Chain,
    backend: Box<dyn ComputeBackend>,
    post: Chain,
    pre_out: Vec<Vec<u8>>,
    model_out: Vec<Vec<u8>>,
    last_backend_ns: u64,
}

impl ModelStage {
    pub fn new(card: &ModelCard) -> Result<ModelStage> {
        let model_in = card.model_input_specs()?;
        let pre = Chain::new(&card.preprocess, &card.input_specs)?;
        let post = Chain::new(&card.postprocess, &card.output_specs)?;
        let buffers = |specs: &[TensorSpec]| specs.iter().map(|s| vec![0u8; s.byte_size()]).collect();
        Ok(ModelStage {
            pre_out: if pre.is_empty() { Vec::new() } else { buffers(&model_in) },
            model_out: if post.is_empty() { Vec::new() } else { buffers(&card.output_specs) },
            backend: build_backend(&card.backend, &model_in, &card.output_specs)?,
            pre,
            post,
            last_backend_ns: 0,
        })
    }

    /// Wall time of the last backend call.
    pub fn last_backend_ns(&self) -> u64 {
        self.last_backend_ns
    }

    /// Runs the full path; `around_infer` wraps the backend call (used to
    /// hold the execution token).
    pub fn run_with(
        &mut self,
        inputs: &[&[u8]],
        outputs: &mut [&mut [u8]],
        around_infer: &mut dyn FnMut(&mut dyn FnMut()),
    ) -> Result<()> {
        let model_in: Vec<&[u8]> = if self.pre.is_empty() {
            inputs.to_vec()
        } else {
            let mut dst: Vec<&mut [u8]> = self.pre_out.iter_mut().map(|b| b.as_mut_slice()).collect();
            self.pre.run(inputs, &mut dst)?;
            self.pre_out.iter().map(|b| b.as_slice()).collect()
        };
        let backend = &mut self.backend;
        let mut result = Ok(());
        let mut elapsed = 0;
        if self.post.is_empty() {
            around_infer(&mut || {
                let t = monotonic_ns();
                result = backend.infer(&model_in, outputs);
                elapsed = monotonic_ns() - t;
            });
            self.last_backend_ns = elapsed;
            return result;
        }
        {
            let mut dst: Vec<&mut [u8]> = self.model_out.iter_mut().map(|b| b.as_mut_slice()).collect();
            around_infer(&mut || {
                let t = monotonic_ns();
                result = backend.infer(&model_in, &mut dst);
                elapsed = monotonic_ns() - t;
            });
        }
        self.last_backend_ns = elapsed;
        result?;
        let src: Vec<&[u8]> = self.model_out.iter().map(|b| b.as_slice()).collect();
        self.post.run(&src, outputs)
    }

    pub fn run(&mut self, inputs: &[&[u8]], outputs: &mut [&mut [u8]]) -> Result<()> {
        self.run_with(inputs, outputs, &mut |f| f())
    }
}

/// Worker end of the control socket.
pub struct ControlPort {
    stream: UnixStream,
    buf: FrameBuffer,
    closed: bool,
}

impl ControlPort {
    pub fn connect(path: &Path, timeout: Duration) -> Result<ControlPort> {
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match UnixStream::connect(path) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    let _ = e;
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(Error::Startup(format!("control {}: {e}", path.display()))),
            }
        };
        stream.set_nonblocking(true)?;
        Ok(ControlPort {
            stream,
            buf: FrameBuffer::default(),
            closed: false,
        })
    }

    /// Next complete command, if one has arrived. A closed socket reads as
    /// `STOP`.
    pub fn next_command(&mut self) -> Result<Option<std::result::Result<Command, Error>>> {
        loop {
            if let Some(text) = self.buf.next_frame()? {
                return Ok(Some(Command::decode(&text)));
            }
            if self.closed {
                return Ok(None);
            }
            let mut chunk = [0u8; 512];
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    self.closed = true;
                    return Ok(Some(Ok(Command::Stop)));
                }
                Ok(n) => self.buf.extend(&chunk[..n]),
                Err(e) if e.kind() == ErrorKind::WouldBlock => return Ok(None),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(_) => {
                    self.closed = true;
                    return Ok(Some(Ok(Command::Stop)));
                }
            }
        }
    }

    pub fn reply(&mut self, reply: &Reply) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        self.stream.set_nonblocking(false)?;
        let r = write_frame(&mut self.stream, &reply.encode());
        self.stream.set_nonblocking(true)?;
        let _ = self.stream.flush();
        r
    }
}

fn pin_to_cpu(cpu: usize) -> Result<()> {
    // SAFETY: cpu_set_t is plain data; the mask is fully initialized.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(std::io::Error::last_os_error().into());
        }
    }
    Ok(())
}

/// Mutable loop state shared by all roles.
struct Worker {
    plan: WorkerPlan,
    block: ControlBlock,
    port: ControlPort,
    metrics: MetricsBuffer,
    gate: RateGate,
    paused: bool,
    stop: bool,
}

impl Worker {
    fn idx(&self) -> u32 {
        self.plan.index
    }

    fn heartbeat(&self) {
        self.block.heartbeat(self.idx());
    }

    fn set_running_state(&self) {
        let state = if self.paused { WorkerState::Paused } else { WorkerState::Running };
        self.block.set_state(self.idx(), state);
    }

    fn publish_rate(&self) {
        let mhz = match self.gate.rate() {
            Rate::Hz(hz) => (hz * 1000.0).round() as u64,
            Rate::Unlimited => 0,
        };
        self.block.set(self.idx(), Counter::RateMilliHz, mhz);
    }

    /// Answers every pending control command.
    fn service_control(&mut self) -> Result<()> {
        while let Some(cmd) = self.port.next_command()? {
            let reply = match cmd {
                Err(e) => Reply::from_error(&e),
                Ok(cmd) => self.handle(&cmd),
            };
            self.port.reply(&reply)?;
            if let Reply::Ok(body) = &reply {
                if body == "fault" {
                    log_event(&self.plan.name, "fault", "injected panic");
                    panic!("injected fault in {}", self.plan.name);
                }
            }
        }
        Ok(())
    }

    fn handle(&mut self, cmd: &Command) -> Reply {
        if let Some(head) = cmd.head() {
            if self.plan.role != Role::Head || head != self.plan.name {
                return Reply::from_error(&Error::NotFound(format!("head {head}")));
            }
        }
        match cmd {
            Command::SetRate(_, rate) => match self.gate.set_rate(*rate, monotonic_ns()) {
                Ok(()) => {
                    self.publish_rate();
                    log_event(&self.plan.name, "rate", &rate.to_string());
                    Reply::ok()
                }
                Err(e) => Reply::from_error(&e),
            },
            Command::Pause(_) => {
                self.paused = true;
                self.set_running_state();
                Reply::ok()
            }
            Command::Resume(_) => {
                self.paused = false;
                self.set_running_state();
                Reply::ok()
            }
            Command::Stop => {
                self.stop = true;
                Reply::ok()
            }
            Command::Stats => match serde_json::to_string(&self.block.snapshot(self.idx())) {
                Ok(body) => Reply::Ok(body),
                Err(e) => Reply::from_error(&Error::Protocol(e.to_string())),
            },
            Command::Fault(_) => Reply::Ok("fault".into()),
        }
    }

    /// Heartbeat and control poll; true when the loop should end.
    fn tick(&mut self) -> Result<bool> {
        self.heartbeat();
        self.service_control()?;
        Ok(self.stop)
    }

    fn finish(&mut self) -> Result<()> {
        self.block.set(self.idx(), Counter::PostInitAllocs, audit::post_init_allocations());
        if let Some(path) = &self.plan.metrics_path {
            self.metrics.write_csv(path)?;
        }
        self.block.set_state(self.idx(), WorkerState::Stopped);
        log_event(&self.plan.name, "stopped", "");
        Ok(())
    }
}

fn consumed_labels(card: &ModelCard) -> Vec<&str> {
    card.input_specs.iter().map(|s| s.label.as_str()).collect()
}

/// Runs one worker to completion according to its plan.
pub fn run_worker(plan: WorkerPlan, control: &Path) -> Result<()> {
    if let Some(cpu) = plan.pin_cpu {
        pin_to_cpu(cpu)?;
    }
    let port = ControlPort::connect(control, Duration::from_secs(10))?;
    let block = ControlBlock::open(&plan.namespace)?;
    block.set_pid(plan.index, std::process::id());
    block.heartbeat(plan.index);
    let gate = RateGate::new(plan.rate)?;
    let metrics = MetricsBuffer::with_capacity(plan.metrics_capacity);
    let mut worker = Worker {
        plan,
        block,
        port,
        metrics,
        gate,
        paused: false,
        stop: false,
    };
    worker.publish_rate();
    let result = match worker.plan.role {
        Role::Source => run_source(&mut worker),
        Role::Foundation | Role::Head => run_model(&mut worker),
    };
    if let Err(e) = &result {
        log_event(&worker.plan.name, "error", &e.to_string());
        worker.block.set_state(worker.idx(), WorkerState::Failed);
        return result;
    }
    worker.finish()
}

fn run_source(w: &mut Worker) -> Result<()> {
    let plan = w.plan.source.clone().ok_or_else(|| Error::Config("source plan missing".into()))?;
    let output = open_channel(&w.plan.output)?;
    audit::mark_init_complete();
    w.set_running_state();
    log_event(&w.plan.name, "running", &format!("rate {} Hz", plan.rate_hz));

    let ready_by = Instant::now() + Duration::from_millis(plan.startup_timeout_ms);
    while plan.peers.iter().any(|&p| w.block.state(p) == WorkerState::Starting) && Instant::now() < ready_by {
        if w.tick()? {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(2));
    }

    let period = (plan.rate_hz > 0.0).then(|| (1e9 / plan.rate_hz).round() as u64);
    let start = monotonic_ns() + 10_000_000;
    let mut frame = 0u64;
    loop {
        if w.tick()? {
            return Ok(());
        }
        if plan.frames.is_some_and(|n| frame >= n) || w.paused {
            std::thread::sleep(POLL_INTERVAL);
            continue;
        }
        if plan.lockstep && frame > 0 && !wait_lockstep(w, &plan, frame)? {
            return Ok(());
        }
        let next = frame + 1;
        let capture = match period {
            Some(p) => {
                let due = start + frame * p;
                // Sleep in short steps so control stays responsive.
                loop {
                    let now = monotonic_ns();
                    if now >= due {
                        break;
                    }
                    std::thread::sleep(Duration::from_nanos((due - now).min(POLL_INTERVAL.as_nanos() as u64)));
                    if w.tick()? {
                        return Ok(());
                    }
                }
                due
            }
            None => monotonic_ns(),
        };
        let word = next.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let t0 = monotonic_ns();
        let outcome = output.push(next, capture, |slot| {
            for t in slot.tensors_mut()? {
                fill_pattern(t, word);
            }
            Ok(())
        })?;
        let t1 = monotonic_ns();
        frame = next;
        let idx = w.idx();
        if outcome == PushOutcome::OverflowRejected {
            w.block.add(idx, Counter::Drops, 1);
        } else {
            w.block.add(idx, Counter::Outputs, 1);
        }
        w.block.add(idx, Counter::Iterations, 1);
        w.block.set(idx, Counter::LastOutputFrame, frame);
        w.metrics.push(MetricRow { frame_id: frame, t0, t1, backend_ns: 0 });
    }
}

/// Waits until every live head has output frame `frame`. False on stop.
fn wait_lockstep(w: &mut Worker, plan: &SourcePlan, frame: u64) -> Result<bool> {
    let deadline = Instant::now() + Duration::from_millis(plan.lockstep_timeout_ms);
    loop {
        let seen = w.block.progress_value();
        let done = plan.heads.iter().all(|&h| {
            !matches!(w.block.state(h), WorkerState::Running | WorkerState::Starting)
                || w.block.counter(h, Counter::LastOutputFrame) >= frame
        });
        if done || Instant::now() >= deadline {
            return Ok(true);
        }
        w.block.wait_progress(seen, POLL_INTERVAL);
        if w.tick()? {
            return Ok(false);
        }
    }
}

fn run_model(w: &mut Worker) -> Result<()> {
    let card = w.plan.card.clone().ok_or_else(|| Error::Config("card missing".into()))?;
    let input_handle = w.plan.input.clone().ok_or_else(|| Error::Config("input channel missing".into()))?;
    let mut input = open_channel(&input_handle)?;
    input.register_consumer(w.plan.consumer_id)?;
    let output = open_channel(&w.plan.output)?;
    let proc_handle = w.plan.proc_arena.clone().ok_or_else(|| Error::Config("processing arena missing".into()))?;
    let proc_arena = import_arena(&proc_handle)?;
    let proc_slots = w.plan.proc_slots.clone();
    let mut stage = ModelStage::new(&card)?;
    audit::mark_init_complete();
    w.set_running_state();
    log_event(&w.plan.name, "running", &format!("card {}@{} rate {}", card.name, card.version, w.gate.rate()));

    let labels = consumed_labels(&card);
    let mut last_seen = input.cursor(w.plan.consumer_id)?;
    loop {
        if w.tick()? {
            return Ok(());
        }
        if w.paused {
            std::thread::sleep(POLL_INTERVAL / 2);
            continue;
        }
        let bell = input.doorbell_value();
        let Some(mut lease) = input.acquire_latest(w.plan.consumer_id)? else {
            input.wait_for_push(bell, POLL_INTERVAL);
            continue;
        };
        if lease.frame_id() <= last_seen {
            drop(lease);
            input.wait_for_push(bell, POLL_INTERVAL);
            continue;
        }
        last_seen = lease.frame_id();
        if !w.gate.admit(lease.capture_ts()) {
            continue;
        }
        let idx = w.idx();
        w.block.set(idx, Counter::LeasedSlot, lease.slot() as u64 + 1);
        let consumed = lease.consume(&SlotGroup::new(&proc_arena, &proc_slots), &labels);
        drop(lease);
        w.block.set(idx, Counter::LeasedSlot, 0);
        let env = match consumed {
            Ok(env) => env,
            Err(e) => {
                w.block.add(idx, Counter::Errors, 1);
                log_event(&w.plan.name, "consume_error", &e.to_string());
                continue;
            }
        };
        w.block.add(idx, Counter::Consumed, 1);
        w.block.set(idx, Counter::Copies, tensor_arena::copy_count());
        w.block.add(idx, Counter::Iterations, 1);

        let result = infer_and_publish(w, &mut stage, &proc_arena, &proc_slots, &output, env.frame_id, env.capture_ts);
        match result {
            Ok(accepted) => {
                let t1 = monotonic_ns();
                w.block.add(idx, if accepted { Counter::Outputs } else { Counter::Drops }, 1);
                w.block.add(idx, Counter::BackendNs, stage.last_backend_ns());
                w.block.set(idx, Counter::LastOutputFrame, env.frame_id);
                w.block.ring_progress();
                w.metrics.push(MetricRow {
                    frame_id: env.frame_id,
                    t0: env.capture_ts,
                    t1,
                    backend_ns: stage.last_backend_ns(),
                });
            }
            Err(e) => {
                w.block.add(idx, Counter::Errors, 1);
                log_event(&w.plan.name, "infer_error", &e.to_string());
            }
        }
    }
}

fn infer_and_publish(
    w: &Worker,
    stage: &mut ModelStage,
    proc_arena: &Arena,
    proc_slots: &[SlotRef],
    output: &Channel,
    frame_id: u64,
    capture_ts: u64,
) -> Result<bool> {
    let views = proc_slots
        .iter()
        .map(|s| proc_arena.read_view(s).map(|v| v.as_bytes()))
        .collect::<Result<Vec<_>>>()?;
    let block = &w.block;
    let idx = w.idx();
    let token = w.plan.exec_token;
    let outcome = output.push(frame_id, capture_ts, |slot| {
        let mut outs = slot.tensors_mut()?;
        stage.run_with(&views, &mut outs, &mut |infer| {
            if token {
                let _guard = block.acquire_token(idx, || block.heartbeat(idx));
                infer();
            } else {
                infer();
            }
        })
    })?;
    Ok(outcome.accepted())
}

/// Entry point shared by the worker binaries: parses startup parameters,
/// runs the worker and returns the process exit code.
pub fn worker_main(args: &[String]) -> i32 {
    let mut namespace = None;
    let mut role = None;
    let mut card = None;
    let mut control = None;
    let mut plan_path = None;
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let slot = match flag.as_str() {
            "--namespace" => &mut namespace,
            "--role" => &mut role,
            "--card" => &mut card,
            "--control" => &mut control,
            "--plan" => &mut plan_path,
            other => {
                eprintln!("unknown worker argument {other}");
                return 2;
            }
        };
        *slot = it.next().cloned();
    }
    let (Some(namespace), Some(role), Some(card), Some(control), Some(plan_path)) =
        (namespace, role, card, control, plan_path)
    else {
        eprintln!("usage: --namespace NS --role ROLE --card CARD --control SOCKET --plan PLAN");
        return 2;
    };
    let result = (|| {
        let plan = WorkerPlan::load(Path::new(&plan_path))?;
        let role: Role = role.parse()?;
        let plan_card = plan.card.as_ref().map(|c| c.name.as_str()).unwrap_or("-");
        if plan.namespace != namespace || plan.role != role || plan_card != card {
            return Err(Error::Config(format!(
                "startup parameters {namespace}/{role:?}/{card} disagree with plan"
            )));
        }
        run_worker(plan, Path::new(&control))
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            log_event("worker", "exit", &e.to_string());
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::backend::BackendDescriptor;
    use crate::registry::CardKind;
    use crate::tensor_arena::DType;

    fn card(pre: Vec<TransformKind>, post: Vec<TransformKind>) -> ModelCard {
        ModelCard {
            name: "m".into(),
            version: 1,
            kind: CardKind::Foundation,
            input_specs: vec![TensorSpec::new("image", DType::U8, &[4, 4, 3]).unwrap()],
            output_specs: vec![TensorSpec::new("final", DType::F32, &[2, 3]).unwrap()],
            backend: BackendDescriptor::MatmulChain { n: 3, k: 2, threads: 1, seed: 1 },
            default_rate: Rate::Unlimited,
            preprocess: pre,
            postprocess: post,
            checksum: None,
        }
    }

    #[test]
    fn stage_applies_chains_around_backend() {
        let pre = vec![
            TransformKind::CropPad { dims: vec![2, 2, 3] },
            TransformKind::CastDType { to: DType::F32 },
            TransformKind::NormalizeAffine { scale: vec![0.5], offset: vec![1.0] },
        ];
        let post = vec![TransformKind::Reshape { dims: vec![6] }];
        let image: Vec<u8> = (0..48).collect();
        let mut stage = ModelStage::new(&card(pre.clone(), post)).unwrap();
        let mut out = vec![0u8; 24];
        stage.run(&[&image], &mut [&mut out]).unwrap();

        // Oracle: the same steps done by hand, then the bare backend.
        let mut cropped = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    cropped.push(image[(y * 4 + x) * 3 + c] as f32 * 0.5 + 1.0);
                }
            }
        }
        let bytes: Vec<u8> = cropped.iter().flat_map(|v| v.to_le_bytes()).collect();
        let specs = card(pre, vec![]).model_input_specs().unwrap();
        let c = card(vec![], vec![]);
        let mut backend = build_backend(&c.backend, &specs, &c.output_specs).unwrap();
        let mut expected = vec![0u8; 24];
        backend.infer(&[&bytes], &mut [&mut expected]).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MetricsBuffer::with_capacity(2);
        m.push(MetricRow { frame_id: 1, t0: 2, t1: 3, backend_ns: 4 });
        m.push(MetricRow { frame_id: 5, t0: 6, t1: 7, backend_ns: 8 });
        m.push(MetricRow::default());
        assert_eq!(m.overflow, 1);
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        assert_eq!(MetricsBuffer::read_csv(&path).unwrap(), m.rows());
    }

    #[test]
    fn roles_parse() {
        assert_eq!("head".parse::<Role>().unwrap(), Role::Head);
        assert!("boss".parse::<Role>().is_err());
    }
}
