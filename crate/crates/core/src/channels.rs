//! Inter-process channels over a tensor arena: an ordered FIFO queue that
//! rejects on overflow, and a latest-wins ring that evicts the oldest frame.
//!
//! Each slot holds one frame's labeled tensor group and a state word:
//!
//! ```text
//! FREE(0) -> WRITING(1) -> READY(2) -> LEASED(n) = 2 + n -> READY | FREE
//! ```
//!
//! A single producer moves slots FREE->WRITING->READY. LATEST eviction takes
//! a READY slot straight to WRITING with one CAS, so a slot a consumer has
//! leased can never be chosen. Consumers lease with a CAS on the state word,
//! copy the labels they need into private processing slots, and release.
//! FIFO pops claim with READY->LEASED(1) and finish with ->FREE.
//!
//! Control header (little-endian, in its own region `<name>.ctl`):
//!
//! ```text
//! 0    magic "PECH1\0"
//! 6    mode u8 (0 FIFO, 1 LATEST)
//! 8    capacity u32
//! 12   label count u32
//! 16   slot records, capacity x 24 bytes:
//!        state u32, pad u32, frame_id u64, capture_ts u64
//! ..   consumer cursors, 16 x 16 bytes: consumer_id u32, pad u32, last_frame u64
//! ..   producer_drops u64, evictions u64
//! ..   accepted u64, popped u64, last_pushed u64, writer_errors u64,
//!      doorbell u32, waiters u32
//! ```

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::log_event;
use crate::error::{Error, Result};
use crate::futex::{self, Backoff};
use crate::shm::{self, Region};
use crate::tensor_arena::{
    self, copy_out, Arena, ArenaLayout, ShareHandle, SlotRef, TensorSpec, TensorView,
};

const MAGIC: &[u8; 6] = b"PECH1\0";
const OFF_MODE: usize = 6;
const OFF_CAPACITY: usize = 8;
const OFF_LABELS: usize = 12;
const OFF_SLOTS: usize = 16;
const SLOT_RECORD: usize = 24;
const CURSOR_RECORD: usize = 16;
pub const MAX_CONSUMERS: usize = 16;
const MAX_CAPACITY: u32 = 4096;

const FREE: u32 = 0;
const WRITING: u32 = 1;
const READY: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Fifo,
    Latest,
}

impl ChannelMode {
    fn to_byte(self) -> u8 {
        match self {
            ChannelMode::Fifo => 0,
            ChannelMode::Latest => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ChannelMode::Fifo),
            1 => Some(ChannelMode::Latest),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    Free,
    Writing,
    Ready,
    Leased(u32),
}

impl SlotState {
    fn decode(word: u32) -> SlotState {
        match word {
            FREE => SlotState::Free,
            WRITING => SlotState::Writing,
            READY => SlotState::Ready,
            n => SlotState::Leased(n - READY),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEnvelope {
    pub frame_id: u64,
    pub capture_ts: u64,
    pub labels: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    AcceptedEvicting(u64),
    OverflowRejected,
}

impl PushOutcome {
    pub fn accepted(self) -> bool {
        !matches!(self, PushOutcome::OverflowRejected)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub mode: ChannelMode,
    pub capacity: u32,
    pub specs: Vec<TensorSpec>,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        shm::validate_name("channel", &self.name)?;
        if self.capacity < 2 || self.capacity > MAX_CAPACITY {
            return Err(Error::Config(format!(
                "channel {}: capacity must be 2..={MAX_CAPACITY}, got {}",
                self.name, self.capacity
            )));
        }
        if self.specs.is_empty() {
            return Err(Error::Config(format!("channel {}: no tensor specs", self.name)));
        }
        for (i, spec) in self.specs.iter().enumerate() {
            spec.validate()?;
            if self.specs[..i].iter().any(|s| s.label == spec.label) {
                return Err(Error::Config(format!(
                    "channel {}: duplicate label {}",
                    self.name, spec.label
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.label.clone()).collect()
    }

    /// Data arena layout: slot `s`, label `l` has slot id `s * labels + l`.
    pub fn arena_layout(&self) -> Result<ArenaLayout> {
        let mut slots = Vec::with_capacity(self.capacity as usize * self.specs.len());
        for s in 0..self.capacity as usize {
            for (l, spec) in self.specs.iter().enumerate() {
                slots.push(((s * self.specs.len() + l) as u32, spec.clone()));
            }
        }
        ArenaLayout::new(slots)
    }

    fn header_bytes(&self) -> usize {
        shm::round_up(Offsets::new(self.capacity).end, shm::page_size())
    }

    /// Total shared bytes this channel occupies (header + data regions).
    pub fn footprint(&self) -> Result<usize> {
        Ok(self.header_bytes() + self.arena_layout()?.total_bytes())
    }
}

/// Serializable description of an existing channel, for importers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelHandle {
    pub spec: ChannelSpec,
    pub header: ShareHandle,
    pub arena: ShareHandle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Push attempts that reached a slot decision (accepted + rejected).
    pub pushed: u64,
    pub accepted: u64,
    pub producer_drops: u64,
    pub evictions: u64,
    pub popped: u64,
    pub writer_errors: u64,
    /// Slots currently READY or LEASED.
    pub resident: u64,
}

impl ChannelStats {
    /// accepted = evictions + popped + resident, i.e. every pushed frame is
    /// rejected, evicted, popped, or still resident.
    pub fn conserved(&self) -> bool {
        self.pushed == self.accepted + self.producer_drops
            && self.accepted == self.evictions + self.popped + self.resident
    }
}

struct Offsets {
    cursors: usize,
    drops: usize,
    evictions: usize,
    accepted: usize,
    popped: usize,
    last_pushed: usize,
    writer_errors: usize,
    doorbell: usize,
    waiters: usize,
    end: usize,
}

impl Offsets {
    fn new(capacity: u32) -> Offsets {
        let cursors = OFF_SLOTS + capacity as usize * SLOT_RECORD;
        let drops = cursors + MAX_CONSUMERS * CURSOR_RECORD;
        Offsets {
            cursors,
            drops,
            evictions: drops + 8,
            accepted: drops + 16,
            popped: drops + 24,
            last_pushed: drops + 32,
            writer_errors: drops + 40,
            doorbell: drops + 48,
            waiters: drops + 52,
            end: drops + 56,
        }
    }
}

/// Endpoint of a channel. Confine to one thread at a time; it may be moved.
pub struct Channel {
    handle: ChannelHandle,
    header: Region,
    arena: Arena,
    offsets: Offsets,
    labels: usize,
    warnings: Vec<String>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("name", &self.handle.spec.name)
            .field("mode", &self.handle.spec.mode)
            .field("capacity", &self.handle.spec.capacity)
            .finish()
    }
}

/// A labeled group of destination slots (processing slots) in some arena.
#[derive(Clone, Copy)]
pub struct SlotGroup<'a> {
    pub arena: &'a Arena,
    pub slots: &'a [SlotRef],
}

impl<'a> SlotGroup<'a> {
    pub fn new(arena: &'a Arena, slots: &'a [SlotRef]) -> Self {
        SlotGroup { arena, slots }
    }

    pub fn get(&self, label: &str) -> Option<&'a SlotRef> {
        self.slots.iter().find(|s| s.spec.label == label)
    }
}

/// Gives a push writer callback access to the WRITING slot group.
pub struct SlotWriter<'a> {
    channel: &'a Channel,
    slot: usize,
}

impl<'a> SlotWriter<'a> {
    pub fn specs(&self) -> &'a [TensorSpec] {
        &self.channel.handle.spec.specs
    }

    fn label_index(&self, label: &str) -> Result<usize> {
        self.channel
            .handle
            .spec
            .specs
            .iter()
            .position(|s| s.label == label)
            .ok_or_else(|| Error::Label(label.to_string()))
    }

    pub fn write(&mut self, label: &str, data: &[u8]) -> Result<()> {
        let slot = self.channel.slot_ref(self.slot, self.label_index(label)?);
        self.channel.arena.write_tensor(slot, data)
    }

    /// Mutable bytes of one label in the slot being written.
    pub fn tensor_mut(&mut self, label: &str) -> Result<&mut [u8]> {
        let slot = self.channel.slot_ref(self.slot, self.label_index(label)?);
        // SAFETY: the slot is in WRITING state, owned by this producer.
        unsafe { self.channel.arena.bytes_mut(slot) }
    }

    /// Mutable bytes of every label, in channel order.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut [u8]>> {
        (0..self.channel.labels)
            .map(|l| {
                let slot = self.channel.slot_ref(self.slot, l);
                // SAFETY: as above; slots of one group are disjoint.
                unsafe { self.channel.arena.bytes_mut(slot) }
            })
            .collect()
    }
}

pub fn create_channel(
    spec: &ChannelSpec,
    namespace: &str,
    expected_consumers: usize,
) -> Result<(Channel, ChannelHandle)> {
    spec.validate()?;
    let layout = spec.arena_layout()?;
    let header = Region::create(namespace, &format!("{}.ctl", spec.name), spec.header_bytes())?;
    let (arena, arena_handle) =
        match tensor_arena::create_arena(&layout, namespace, &format!("{}.data", spec.name)) {
            Ok(v) => v,
            Err(e) => {
                let _ = std::fs::remove_file(
                    shm::namespace_dir(namespace).join(format!("{}.ctl", spec.name)),
                );
                return Err(e);
            }
        };
    header.write_bytes(0, MAGIC);
    header.write_bytes(OFF_MODE, &[spec.mode.to_byte()]);
    header.write_bytes(OFF_CAPACITY, &spec.capacity.to_le_bytes());
    header.write_bytes(OFF_LABELS, &(spec.specs.len() as u32).to_le_bytes());
    let handle = ChannelHandle {
        spec: spec.clone(),
        header: ShareHandle {
            namespace: namespace.to_string(),
            region_name: format!("{}.ctl", spec.name),
            total_bytes: header.len() as u64,
        },
        arena: arena_handle,
    };
    let mut channel = Channel {
        offsets: Offsets::new(spec.capacity),
        labels: spec.specs.len(),
        handle: handle.clone(),
        header,
        arena,
        warnings: Vec::new(),
    };
    if spec.mode == ChannelMode::Latest && (spec.capacity as usize) < expected_consumers + 1 {
        channel.warn(format!(
            "capacity {} below consumers + 1 = {}; producer may drop while all slots are leased",
            spec.capacity,
            expected_consumers + 1
        ));
    }
    Ok((channel, handle))
}

pub fn open_channel(handle: &ChannelHandle) -> Result<Channel> {
    let spec = &handle.spec;
    let header = Region::open(&handle.header.namespace, &handle.header.region_name)?;
    if header.len() as u64 != handle.header.total_bytes || header.len() < spec.header_bytes() {
        return Err(Error::CorruptHandle(format!("{}: header size", spec.name)));
    }
    let bytes = header.bytes(0, OFF_SLOTS);
    let capacity = u32::from_le_bytes(bytes[OFF_CAPACITY..OFF_CAPACITY + 4].try_into().unwrap());
    let labels = u32::from_le_bytes(bytes[OFF_LABELS..OFF_LABELS + 4].try_into().unwrap());
    if &bytes[..6] != MAGIC
        || ChannelMode::from_byte(bytes[OFF_MODE]) != Some(spec.mode)
        || capacity != spec.capacity
        || labels as usize != spec.specs.len()
    {
        return Err(Error::CorruptHandle(format!("{}: header mismatch", spec.name)));
    }
    let arena = tensor_arena::import_arena_with_layout(&handle.arena, &spec.arena_layout()?)?;
    Ok(Channel {
        offsets: Offsets::new(spec.capacity),
        labels: spec.specs.len(),
        handle: handle.clone(),
        header,
        arena,
        warnings: Vec::new(),
    })
}

impl Channel {
    pub fn handle(&self) -> &ChannelHandle {
        &self.handle
    }

    pub fn name(&self) -> &str {
        &self.handle.spec.name
    }

    pub fn mode(&self) -> ChannelMode {
        self.handle.spec.mode
    }

    pub fn capacity(&self) -> usize {
        self.handle.spec.capacity as usize
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.handle.spec.specs
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn warn(&mut self, message: String) {
        log_event("channel", "warning", &format!("{}: {message}", self.name()));
        self.warnings.push(message);
    }

    fn state(&self, slot: usize) -> &AtomicU32 {
        self.header.u32_at(OFF_SLOTS + slot * SLOT_RECORD)
    }

    fn frame_id(&self, slot: usize) -> &AtomicU64 {
        self.header.u64_at(OFF_SLOTS + slot * SLOT_RECORD + 8)
    }

    fn capture_ts(&self, slot: usize) -> &AtomicU64 {
        self.header.u64_at(OFF_SLOTS + slot * SLOT_RECORD + 16)
    }

    fn cursor_id(&self, entry: usize) -> &AtomicU32 {
        self.header.u32_at(self.offsets.cursors + entry * CURSOR_RECORD)
    }

    fn cursor_frame(&self, entry: usize) -> &AtomicU64 {
        self.header.u64_at(self.offsets.cursors + entry * CURSOR_RECORD + 8)
    }

    fn counter(&self, offset: usize) -> &AtomicU64 {
        self.header.u64_at(offset)
    }

    fn doorbell(&self) -> &AtomicU32 {
        self.header.u32_at(self.offsets.doorbell)
    }

    fn waiters(&self) -> &AtomicU32 {
        self.header.u32_at(self.offsets.waiters)
    }

    fn slot_ref(&self, slot: usize, label: usize) -> &SlotRef {
        &self.arena.slots()[slot * self.labels + label]
    }

    pub fn slot_state(&self, slot: usize) -> SlotState {
        SlotState::decode(self.state(slot).load(Ordering::Acquire))
    }

    /// Frame id currently recorded for a slot (meaningful when READY/LEASED).
    pub fn slot_frame(&self, slot: usize) -> u64 {
        self.frame_id(slot).load(Ordering::Acquire)
    }

    /// Read-only view of a resident tensor without copying. Callers must
    /// hold a lease or otherwise know the slot is not being written.
    pub fn view(&self, slot: usize, label: &str) -> Result<TensorView<'_>> {
        let l = self
            .specs()
            .iter()
            .position(|s| s.label == label)
            .ok_or_else(|| Error::Label(label.to_string()))?;
        self.arena.read_view(self.slot_ref(slot, l))
    }

    pub fn stats(&self) -> ChannelStats {
        let accepted = self.counter(self.offsets.accepted).load(Ordering::Acquire);
        let producer_drops = self.counter(self.offsets.drops).load(Ordering::Acquire);
        let resident = (0..self.capacity())
            .filter(|&s| {
                matches!(self.slot_state(s), SlotState::Ready | SlotState::Leased(_))
            })
            .count() as u64;
        ChannelStats {
            pushed: accepted + producer_drops,
            accepted,
            producer_drops,
            evictions: self.counter(self.offsets.evictions).load(Ordering::Acquire),
            popped: self.counter(self.offsets.popped).load(Ordering::Acquire),
            writer_errors: self.counter(self.offsets.writer_errors).load(Ordering::Acquire),
            resident,
        }
    }

    /// Claims a cursor entry for `consumer_id` (non-zero), or finds the
    /// existing one so a restarted consumer resumes where it left off.
    pub fn register_consumer(&mut self, consumer_id: u32) -> Result<()> {
        if consumer_id == 0 {
            return Err(Error::Config("consumer id 0 is reserved".into()));
        }
        if self.cursor_entry(consumer_id).is_some() {
            return Ok(());
        }
        for entry in 0..MAX_CONSUMERS {
            if self
                .cursor_id(entry)
                .compare_exchange(0, consumer_id, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                let registered = self.consumers().len();
                if self.mode() == ChannelMode::Latest && registered + 1 > self.capacity() {
                    self.warn(format!(
                        "{registered} consumers on capacity {}; leases may starve the producer",
                        self.capacity()
                    ));
                }
                return Ok(());
            }
            if self.cursor_id(entry).load(Ordering::Acquire) == consumer_id {
                return Ok(());
            }
        }
        Err(Error::Config(format!(
            "channel {}: more than {MAX_CONSUMERS} consumers",
            self.name()
        )))
    }

    pub fn consumers(&self) -> Vec<u32> {
        (0..MAX_CONSUMERS)
            .map(|e| self.cursor_id(e).load(Ordering::Acquire))
            .filter(|&id| id != 0)
            .collect()
    }

    fn cursor_entry(&self, consumer_id: u32) -> Option<usize> {
        (0..MAX_CONSUMERS).find(|&e| self.cursor_id(e).load(Ordering::Acquire) == consumer_id)
    }

    fn require_consumer(&self, consumer_id: u32) -> Result<usize> {
        self.cursor_entry(consumer_id).ok_or_else(|| {
            Error::NotFound(format!("consumer {consumer_id} on channel {}", self.name()))
        })
    }

    /// Last frame id consumed by a registered consumer.
    pub fn cursor(&self, consumer_id: u32) -> Result<u64> {
        let entry = self.require_consumer(consumer_id)?;
        Ok(self.cursor_frame(entry).load(Ordering::Acquire))
    }

    /// Producer side: claim a slot, let `writer` fill it, publish it.
    ///
    /// Frame ids must strictly increase. A failing writer leaves the frame
    /// invisible and the slot FREE.
    pub fn push<F>(&self, frame_id: u64, capture_ts: u64, writer: F) -> Result<PushOutcome>
    where
        F: FnOnce(&mut SlotWriter<'_>) -> Result<()>,
    {
        let last = self.counter(self.offsets.last_pushed).load(Ordering::Acquire);
        if frame_id <= last {
            return Err(Error::Protocol(format!(
                "channel {}: frame id {frame_id} not after {last}",
                self.name()
            )));
        }
        let (slot, evicted) = match self.claim_free() {
            Some(slot) => (slot, None),
            None => match self.mode() {
                ChannelMode::Fifo => return Ok(self.reject()),
                ChannelMode::Latest => match self.claim_oldest_ready() {
                    Some((slot, old)) => (slot, Some(old)),
                    None => return Ok(self.reject()),
                },
            },
        };
        if evicted.is_some() {
            self.counter(self.offsets.evictions).fetch_add(1, Ordering::AcqRel);
        }
        self.frame_id(slot).store(frame_id, Ordering::Relaxed);
        self.capture_ts(slot).store(capture_ts, Ordering::Relaxed);
        let result = writer(&mut SlotWriter { channel: self, slot });
        if let Err(e) = result {
            self.frame_id(slot).store(0, Ordering::Relaxed);
            self.state(slot).store(FREE, Ordering::Release);
            self.counter(self.offsets.writer_errors).fetch_add(1, Ordering::AcqRel);
            return Err(match e {
                Error::Writer(m) => Error::Writer(m),
                other => Error::Writer(other.to_string()),
            });
        }
        self.counter(self.offsets.last_pushed).store(frame_id, Ordering::Release);
        self.counter(self.offsets.accepted).fetch_add(1, Ordering::AcqRel);
        self.state(slot).store(READY, Ordering::Release);
        self.ring();
        Ok(match evicted {
            Some(old) => PushOutcome::AcceptedEvicting(old),
            None => PushOutcome::Accepted,
        })
    }

    fn reject(&self) -> PushOutcome {
        self.counter(self.offsets.drops).fetch_add(1, Ordering::AcqRel);
        PushOutcome::OverflowRejected
    }

    fn claim_free(&self) -> Option<usize> {
        (0..self.capacity()).find(|&s| {
            self.state(s)
                .compare_exchange(FREE, WRITING, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
        })
    }

    fn claim_oldest_ready(&self) -> Option<(usize, u64)> {
        loop {
            let oldest = (0..self.capacity())
                .filter(|&s| self.state(s).load(Ordering::Acquire) == READY)
                .min_by_key(|&s| self.frame_id(s).load(Ordering::Acquire))?;
            // The frame id is stable while the state is READY and only the
            // producer (us) rewrites it, so reading it before the CAS is fine.
            let old = self.frame_id(oldest).load(Ordering::Acquire);
            if self
                .state(oldest)
                .compare_exchange(READY, WRITING, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return Some((oldest, old));
            }
        }
    }

    fn ring(&self) {
        self.doorbell().fetch_add(1, Ordering::SeqCst);
        if self.waiters().load(Ordering::SeqCst) > 0 {
            futex::wake_all(self.doorbell());
        }
    }

    /// Current doorbell value; pass to `wait_for_push` after finding no data.
    pub fn doorbell_value(&self) -> u32 {
        self.doorbell().load(Ordering::SeqCst)
    }

    /// Wait until a push happens after `seen` was read, or the timeout ends.
    /// Polls with exponential backoff up to 100 µs, then sleeps on the
    /// doorbell.
    pub fn wait_for_push(&self, seen: u32, timeout: Duration) {
        let deadline = std::time::Instant::now() + timeout;
        let mut backoff = Backoff::new();
        while !backoff.is_saturated() {
            if self.doorbell().load(Ordering::SeqCst) != seen {
                return;
            }
            backoff.snooze();
        }
        let now = std::time::Instant::now();
        if now >= deadline {
            return;
        }
        self.waiters().fetch_add(1, Ordering::SeqCst);
        futex::wait(self.doorbell(), seen, deadline - now);
        self.waiters().fetch_sub(1, Ordering::SeqCst);
    }

    fn check_dst(&self, dst: &SlotGroup<'_>, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                let want = &self.specs()[l];
                let pos = dst
                    .slots
                    .iter()
                    .position(|s| s.spec.label == want.label)
                    .ok_or_else(|| {
                        Error::Shape(format!("no processing slot for label {}", want.label))
                    })?;
                if dst.slots[pos].spec != *want {
                    return Err(Error::Shape(format!(
                        "processing slot {:?} does not match channel spec {:?}",
                        dst.slots[pos].spec, want
                    )));
                }
                Ok(pos)
            })
            .collect()
    }

    fn label_indices(&self, labels: &[&str]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|label| {
                self.specs()
                    .iter()
                    .position(|s| s.label == *label)
                    .ok_or_else(|| Error::Label(label.to_string()))
            })
            .collect()
    }

    fn envelope(&self, frame_id: u64, capture_ts: u64) -> FrameEnvelope {
        FrameEnvelope {
            frame_id,
            capture_ts,
            labels: self.handle.spec.labels(),
        }
    }

    /// Remove the oldest READY frame, copying every label into `dst`.
    pub fn pop_fifo(
        &self,
        consumer_id: u32,
        dst: &SlotGroup<'_>,
        blocking: bool,
    ) -> Result<FrameEnvelope> {
        let entry = self.require_consumer(consumer_id)?;
        let all: Vec<usize> = (0..self.labels).collect();
        let dst_pos = self.check_dst(dst, &all)?;
        loop {
            let seen = self.doorbell_value();
            if let Some(slot) = self.claim_oldest_for_pop() {
                let frame_id = self.frame_id(slot).load(Ordering::Acquire);
                let capture_ts = self.capture_ts(slot).load(Ordering::Acquire);
                let copied = all.iter().zip(&dst_pos).try_for_each(|(&l, &d)| {
                    copy_out(&self.arena, self.slot_ref(slot, l), dst.arena, &dst.slots[d])
                });
                self.state(slot).store(FREE, Ordering::Release);
                self.counter(self.offsets.popped).fetch_add(1, Ordering::AcqRel);
                copied?;
                self.cursor_frame(entry).fetch_max(frame_id, Ordering::AcqRel);
                return Ok(self.envelope(frame_id, capture_ts));
            }
            if !blocking {
                return Err(Error::Empty);
            }
            self.wait_for_push(seen, Duration::from_millis(50));
        }
    }

    fn claim_oldest_for_pop(&self) -> Option<usize> {
        loop {
            let oldest = (0..self.capacity())
                .filter(|&s| self.state(s).load(Ordering::Acquire) == READY)
                .min_by_key(|&s| self.frame_id(s).load(Ordering::Acquire))?;
            if self
                .state(oldest)
                .compare_exchange(READY, READY + 1, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return Some(oldest);
            }
        }
    }

    /// Lease the newest resident frame newer than the consumer's cursor.
    pub fn acquire_latest(&self, consumer_id: u32) -> Result<Option<Lease<'_>>> {
        let entry = self.require_consumer(consumer_id)?;
        let cursor = self.cursor_frame(entry).load(Ordering::Acquire);
        loop {
            let mut best: Option<(usize, u32, u64)> = None;
            for s in 0..self.capacity() {
                let state = self.state(s).load(Ordering::Acquire);
                if state < READY {
                    continue;
                }
                let fid = self.frame_id(s).load(Ordering::Acquire);
                if fid > cursor && best.is_none_or(|(_, _, b)| fid > b) {
                    best = Some((s, state, fid));
                }
            }
            let Some((slot, state, _)) = best else {
                return Ok(None);
            };
            if self
                .state(slot)
                .compare_exchange(state, state + 1, Ordering::AcqRel, Ordering::Acquire)
                .is_err()
            {
                continue;
            }
            // Re-read under the lease: the slot may have been refilled with
            // a newer frame between the scan and the CAS.
            let frame_id = self.frame_id(slot).load(Ordering::Acquire);
            let capture_ts = self.capture_ts(slot).load(Ordering::Acquire);
            if frame_id <= cursor {
                self.release(slot);
                continue;
            }
            return Ok(Some(Lease {
                channel: self,
                slot,
                frame_id,
                capture_ts,
                consumer_id,
                cursor_entry: entry,
                consumed: false,
            }));
        }
    }

    /// Drops one lease on `slot` on behalf of a consumer that died while
    /// holding it. No-op if the slot is not leased.
    pub fn release_abandoned(&self, slot: usize) -> bool {
        if slot >= self.capacity() {
            return false;
        }
        self.state(slot)
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |s| (s > READY).then(|| s - 1))
            .is_ok()
    }

    fn release(&self, slot: usize) {
        let prev = self.state(slot).fetch_sub(1, Ordering::AcqRel);
        debug_assert!(prev > READY, "release of unleased slot");
    }
}

/// A hold on one resident slot. While held, the producer cannot overwrite
/// the slot. Dropping an unconsumed lease releases it without advancing the
/// consumer's cursor.
pub struct Lease<'a> {
    channel: &'a Channel,
    slot: usize,
    frame_id: u64,
    capture_ts: u64,
    consumer_id: u32,
    cursor_entry: usize,
    consumed: bool,
}

impl<'a> std::fmt::Debug for Lease<'a> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lease")
            .field("slot", &self.slot)
            .field("frame_id", &self.frame_id)
            .field("consumer_id", &self.consumer_id)
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl<'a> Lease<'a> {
    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    pub fn capture_ts(&self) -> u64 {
        self.capture_ts
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn consumer_id(&self) -> u32 {
        self.consumer_id
    }

    /// Zero-copy view of a leased tensor.
    pub fn view(&self, label: &str) -> Result<TensorView<'a>> {
        if self.consumed {
            return Err(Error::UseAfterConsume);
        }
        self.channel.view(self.slot, label)
    }

    /// Copy the selected labels into `dst` (one copy per label), release the
    /// lease and advance the consumer cursor.
    pub fn consume(&mut self, dst: &SlotGroup<'_>, labels: &[&str]) -> Result<FrameEnvelope> {
        if self.consumed {
            return Err(Error::UseAfterConsume);
        }
        let channel = self.channel;
        let indices = channel.label_indices(labels)?;
        let dst_pos = channel.check_dst(dst, &indices)?;
        for (&l, &d) in indices.iter().zip(&dst_pos) {
            copy_out(&channel.arena, channel.slot_ref(self.slot, l), dst.arena, &dst.slots[d])?;
        }
        self.consumed = true;
        channel.release(self.slot);
        channel
            .cursor_frame(self.cursor_entry)
            .fetch_max(self.frame_id, Ordering::AcqRel);
        Ok(FrameEnvelope {
            frame_id: self.frame_id,
            capture_ts: self.capture_ts,
            labels: labels.iter().map(|l| l.to_string()).collect(),
        })
    }
}

impl Drop for Lease<'_> {
    fn drop(&mut self) {
        if !self.consumed {
            self.channel.release(self.slot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_arena::{create_arena, DType};
    use crate::test_support::{copy_lock, TestNamespace};

    fn spec(label: &str, dims: &[usize]) -> TensorSpec {
        TensorSpec::new(label, DType::F32, dims).unwrap()
    }

    fn channel(ns: &TestNamespace, mode: ChannelMode, capacity: u32, labels: &[&str]) -> Channel {
        let cs = ChannelSpec {
            name: "ch".into(),
            mode,
            capacity,
            specs: labels.iter().map(|l| spec(l, &[8])).collect(),
        };
        create_channel(&cs, ns.name(), 1).unwrap().0
    }

    fn processing(ns: &TestNamespace, name: &str, labels: &[&str]) -> Arena {
        let layout = ArenaLayout::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| (i as u32, spec(l, &[8])))
                .collect(),
        )
        .unwrap();
        create_arena(&layout, ns.name(), name).unwrap().0
    }

    fn fill(value: f32) -> impl FnOnce(&mut SlotWriter<'_>) -> Result<()> {
        move |w| {
            let bytes: Vec<u8> = std::iter::repeat_n(value.to_le_bytes(), 8).flatten().collect();
            for t in w.tensors_mut()? {
                t.copy_from_slice(&bytes);
            }
            Ok(())
        }
    }

    #[test]
    fn construction_and_capacity_checks() {
        let ns = TestNamespace::new();
        let ch = channel(&ns, ChannelMode::Fifo, 4, &["x"]);
        assert_eq!(ch.capacity(), 4);
        assert!((0..4).all(|s| ch.slot_state(s) == SlotState::Free));
        let bad = ChannelSpec {
            name: "bad".into(),
            mode: ChannelMode::Fifo,
            capacity: 0,
            specs: vec![spec("x", &[8])],
        };
        assert!(matches!(create_channel(&bad, ns.name(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn latest_capacity_below_consumers_warns() {
        let ns = TestNamespace::new();
        let cs = ChannelSpec {
            name: "warn".into(),
            mode: ChannelMode::Latest,
            capacity: 2,
            specs: vec![spec("x", &[8])],
        };
        let (ch, _) = create_channel(&cs, ns.name(), 3).unwrap();
        assert_eq!(ch.warnings().len(), 1);
    }

    #[test]
    fn fifo_rejects_when_full_and_pops_in_order() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Fifo, 2, &["x"]);
        ch.register_consumer(1).unwrap();
        let proc = processing(&ns, "p", &["x"]);
        let dst = SlotGroup::new(&proc, proc.slots());
        assert_eq!(ch.push(1, 0, fill(1.0)).unwrap(), PushOutcome::Accepted);
        assert_eq!(ch.push(2, 0, fill(2.0)).unwrap(), PushOutcome::Accepted);
        assert_eq!(ch.push(3, 0, fill(3.0)).unwrap(), PushOutcome::OverflowRejected);
        assert_eq!(ch.stats().producer_drops, 1);
        assert_eq!(ch.pop_fifo(1, &dst, false).unwrap().frame_id, 1);
        assert_eq!(proc.read_view(&proc.slots()[0]).unwrap().as_bytes()[..4], 1.0f32.to_le_bytes());
        assert_eq!(ch.pop_fifo(1, &dst, false).unwrap().frame_id, 2);
        assert!(matches!(ch.pop_fifo(1, &dst, false), Err(Error::Empty)));
        assert!(ch.stats().conserved());
    }

    #[test]
    fn pop_counts_one_copy_per_label() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Fifo, 2, &["a", "b", "c"]);
        ch.register_consumer(1).unwrap();
        let proc = processing(&ns, "p", &["a", "b", "c"]);
        ch.push(1, 0, fill(1.0)).unwrap();
        let _g = copy_lock();
        let before = tensor_arena::copy_count();
        ch.pop_fifo(1, &SlotGroup::new(&proc, proc.slots()), false).unwrap();
        assert_eq!(tensor_arena::copy_count(), before + 3);
    }

    #[test]
    fn latest_evicts_oldest() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Latest, 2, &["x"]);
        ch.register_consumer(1).unwrap();
        ch.push(1, 0, fill(1.0)).unwrap();
        ch.push(2, 0, fill(2.0)).unwrap();
        assert_eq!(ch.push(3, 0, fill(3.0)).unwrap(), PushOutcome::AcceptedEvicting(1));
        let lease = ch.acquire_latest(1).unwrap().unwrap();
        assert_eq!(lease.frame_id(), 3);
        assert_eq!(lease.view("x").unwrap().as_bytes()[..4], 3.0f32.to_le_bytes());
    }

    #[test]
    fn latest_rejects_when_every_slot_is_leased() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Latest, 2, &["x"]);
        ch.register_consumer(1).unwrap();
        ch.register_consumer(2).unwrap();
        ch.push(1, 0, fill(1.0)).unwrap();
        let a = ch.acquire_latest(1).unwrap().unwrap();
        ch.push(2, 0, fill(2.0)).unwrap();
        let b = ch.acquire_latest(2).unwrap().unwrap();
        assert_eq!((a.frame_id(), b.frame_id()), (1, 2));
        assert_eq!(ch.push(3, 0, fill(3.0)).unwrap(), PushOutcome::OverflowRejected);
        assert_eq!(ch.stats().producer_drops, 1);
        // Leased contents untouched.
        assert_eq!(a.view("x").unwrap().as_bytes()[..4], 1.0f32.to_le_bytes());
        drop(a);
        assert_eq!(ch.push(4, 0, fill(4.0)).unwrap(), PushOutcome::AcceptedEvicting(1));
        drop(b);
        assert!(ch.stats().conserved());
    }

    #[test]
    fn freshness_and_duplicate_suppression() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Latest, 3, &["x"]);
        ch.register_consumer(1).unwrap();
        let proc = processing(&ns, "p", &["x"]);
        let dst = SlotGroup::new(&proc, proc.slots());
        ch.push(4, 0, fill(4.0)).unwrap();
        ch.acquire_latest(1).unwrap().unwrap().consume(&dst, &["x"]).unwrap();
        ch.push(5, 0, fill(5.0)).unwrap();
        let mut lease = ch.acquire_latest(1).unwrap().unwrap();
        assert_eq!(lease.frame_id(), 5);
        lease.consume(&dst, &["x"]).unwrap();
        assert!(ch.acquire_latest(1).unwrap().is_none());
        assert_eq!(ch.cursor(1).unwrap(), 5);
    }

    #[test]
    fn concurrent_leases_share_a_slot() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Latest, 3, &["x"]);
        ch.register_consumer(1).unwrap();
        ch.register_consumer(2).unwrap();
        ch.push(5, 0, fill(5.0)).unwrap();
        let a = ch.acquire_latest(1).unwrap().unwrap();
        let b = ch.acquire_latest(2).unwrap().unwrap();
        assert_eq!(a.slot(), b.slot());
        assert_eq!(ch.slot_state(a.slot()), SlotState::Leased(2));
        drop(a);
        assert_eq!(ch.slot_state(b.slot()), SlotState::Leased(1));
        drop(b);
        assert_eq!(ch.slot_state(0), SlotState::Ready);
    }

    #[test]
    fn selective_consume_copies_only_requested_labels() {
        let ns = TestNamespace::new();
        let labels = ["final", "layer3", "layer6", "layer9"];
        let mut ch = channel(&ns, ChannelMode::Latest, 3, &labels);
        ch.register_consumer(1).unwrap();
        let proc = processing(&ns, "p", &labels);
        let dst = SlotGroup::new(&proc, proc.slots());
        ch.push(1, 0, fill(1.0)).unwrap();
        let _g = copy_lock();
        let before = tensor_arena::copy_count();
        let env = ch.acquire_latest(1).unwrap().unwrap().consume(&dst, &["final"]).unwrap();
        assert_eq!(env.labels, vec!["final"]);
        assert_eq!(tensor_arena::copy_count(), before + 1);
        ch.push(2, 0, fill(2.0)).unwrap();
        ch.acquire_latest(1).unwrap().unwrap().consume(&dst, &labels).unwrap();
        assert_eq!(tensor_arena::copy_count(), before + 5);
    }

    #[test]
    fn consume_errors() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Latest, 3, &["x"]);
        ch.register_consumer(1).unwrap();
        let proc = processing(&ns, "p", &["x"]);
        let dst = SlotGroup::new(&proc, proc.slots());
        ch.push(1, 0, fill(1.0)).unwrap();
        let mut lease = ch.acquire_latest(1).unwrap().unwrap();
        assert!(matches!(lease.consume(&dst, &["nope"]), Err(Error::Label(_))));
        lease.consume(&dst, &["x"]).unwrap();
        assert!(matches!(lease.consume(&dst, &["x"]), Err(Error::UseAfterConsume)));
        let other = processing(&ns, "q", &["y"]);
        ch.push(2, 0, fill(2.0)).unwrap();
        let mut lease = ch.acquire_latest(1).unwrap().unwrap();
        let err = lease.consume(&SlotGroup::new(&other, other.slots()), &["x"]);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(matches!(ch.acquire_latest(9), Err(Error::NotFound(_))));
    }

    #[test]
    fn writer_failure_leaves_frame_invisible() {
        let ns = TestNamespace::new();
        let mut ch = channel(&ns, ChannelMode::Latest, 2, &["x"]);
        ch.register_consumer(1).unwrap();
        let err = ch.push(1, 0, |_| Err(Error::Backend("boom".into())));
        assert!(matches!(err, Err(Error::Writer(_))));
        assert!(ch.acquire_latest(1).unwrap().is_none());
        assert!((0..2).all(|s| ch.slot_state(s) == SlotState::Free));
        assert!(ch.stats().conserved());
        assert_eq!(ch.stats().writer_errors, 1);
        // The failed frame was never published, so its id may be retried.
        assert_eq!(ch.push(1, 0, fill(1.0)).unwrap(), PushOutcome::Accepted);
        assert!(matches!(ch.push(1, 0, fill(1.0)), Err(Error::Protocol(_))));
    }

    #[test]
    fn importer_sees_same_channel() {
        let ns = TestNamespace::new();
        let cs = ChannelSpec {
            name: "shared".into(),
            mode: ChannelMode::Latest,
            capacity: 3,
            specs: vec![spec("x", &[8])],
        };
        let (producer, handle) = create_channel(&cs, ns.name(), 1).unwrap();
        let mut consumer = open_channel(&handle).unwrap();
        consumer.register_consumer(7).unwrap();
        producer.push(1, 42, fill(9.0)).unwrap();
        let lease = consumer.acquire_latest(7).unwrap().unwrap();
        assert_eq!(lease.capture_ts(), 42);
        assert_eq!(lease.view("x").unwrap().as_bytes()[..4], 9.0f32.to_le_bytes());
        let mut wrong = handle.clone();
        wrong.spec.capacity = 4;
        assert!(matches!(open_channel(&wrong), Err(Error::CorruptHandle(_))));
    }
}
