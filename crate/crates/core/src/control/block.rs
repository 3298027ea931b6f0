//! Shared control block: the execution token, a progress doorbell and one
//! heartbeat record per worker, all in a single region `<ns>/control`.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::monotonic_ns;
use crate::error::{Error, Result};
use crate::futex;
use crate::shm::{self, Region};

pub const MAX_WORKERS: usize = 64;
const REGION: &str = "control";
const MAGIC: &[u8; 8] = b"PECTL1\0\0";
const HEADER: usize = 64;
const RECORD: usize = 128;

const OFF_TOKEN: usize = 8;
const OFF_TOKEN_WAITERS: usize = 12;
const OFF_PROGRESS: usize = 16;
const OFF_PROGRESS_WAITERS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkerState {
    Starting,
    Running,
    Paused,
    Failed,
    Stopped,
}

impl WorkerState {
    fn from_u32(v: u32) -> WorkerState {
        match v {
            1 => WorkerState::Running,
            2 => WorkerState::Paused,
            3 => WorkerState::Failed,
            4 => WorkerState::Stopped,
            _ => WorkerState::Starting,
        }
    }

    fn as_u32(self) -> u32 {
        self as u32
    }
}

/// Counter fields of a worker record, in layout order after
/// `pid: u32, state: u32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Counter {
    LastSeen = 0,
    Iterations,
    Errors,
    Copies,
    Outputs,
    Consumed,
    LastOutputFrame,
    PostInitAllocs,
    Drops,
    /// Current gate rate in milli-Hz, 0 for unlimited.
    RateMilliHz,
    /// Slot index + 1 of a lease currently held, 0 for none.
    LeasedSlot,
    /// Cumulative nanoseconds spent inside backend inference.
    BackendNs,
}

/// Plain snapshot of one worker record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatRecord {
    pub worker: u32,
    pub pid: u32,
    pub last_seen: u64,
    pub iterations: u64,
    pub errors: u64,
    pub copies: u64,
    pub outputs: u64,
    pub consumed: u64,
    pub last_output_frame: u64,
    pub post_init_allocs: u64,
    pub drops: u64,
    pub rate_millihz: u64,
    pub leased_slot: u64,
    pub backend_ns: u64,
}

pub struct ControlBlock {
    region: Region,
}

impl std::fmt::Debug for ControlBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlBlock").field("len", &self.region.len()).finish()
    }
}

impl ControlBlock {
    pub fn footprint() -> usize {
        shm::round_up(HEADER + MAX_WORKERS * RECORD, shm::page_size())
    }

    pub fn create(namespace: &str) -> Result<ControlBlock> {
        let region = Region::create(namespace, REGION, Self::footprint())?;
        region.write_bytes(0, MAGIC);
        Ok(ControlBlock { region })
    }

    pub fn open(namespace: &str) -> Result<ControlBlock> {
        let region = Region::open(namespace, REGION)?;
        if region.len() < Self::footprint() || region.bytes(0, 8) != MAGIC {
            return Err(Error::CorruptHandle(format!("{namespace}/{REGION}: not a control block")));
        }
        Ok(ControlBlock { region })
    }

    fn record(&self, worker: u32) -> usize {
        assert!((worker as usize) < MAX_WORKERS, "worker index {worker} out of range");
        HEADER + worker as usize * RECORD
    }

    fn counter_at(&self, worker: u32, c: Counter) -> &AtomicU64 {
        self.region.u64_at(self.record(worker) + 8 + 8 * c as usize)
    }

    pub fn set_pid(&self, worker: u32, pid: u32) {
        self.region.u32_at(self.record(worker)).store(pid, Ordering::Release);
    }

    pub fn pid(&self, worker: u32) -> u32 {
        self.region.u32_at(self.record(worker)).load(Ordering::Acquire)
    }

    pub fn state(&self, worker: u32) -> WorkerState {
        WorkerState::from_u32(self.region.u32_at(self.record(worker) + 4).load(Ordering::Acquire))
    }

    pub fn set_state(&self, worker: u32, state: WorkerState) {
        self.region
            .u32_at(self.record(worker) + 4)
            .store(state.as_u32(), Ordering::Release);
    }

    pub fn counter(&self, worker: u32, c: Counter) -> u64 {
        self.counter_at(worker, c).load(Ordering::Acquire)
    }

    pub fn set(&self, worker: u32, c: Counter, value: u64) {
        self.counter_at(worker, c).store(value, Ordering::Release);
    }

    pub fn add(&self, worker: u32, c: Counter, delta: u64) {
        self.counter_at(worker, c).fetch_add(delta, Ordering::AcqRel);
    }

    /// Records liveness; `last_seen` never moves backwards.
    pub fn heartbeat(&self, worker: u32) {
        self.counter_at(worker, Counter::LastSeen)
            .fetch_max(monotonic_ns(), Ordering::AcqRel);
    }

    pub fn snapshot(&self, worker: u32) -> HeartbeatRecord {
        let c = |k| self.counter(worker, k);
        HeartbeatRecord {
            worker,
            pid: self.pid(worker),
            last_seen: c(Counter::LastSeen),
            iterations: c(Counter::Iterations),
            errors: c(Counter::Errors),
            copies: c(Counter::Copies),
            outputs: c(Counter::Outputs),
            consumed: c(Counter::Consumed),
            last_output_frame: c(Counter::LastOutputFrame),
            post_init_allocs: c(Counter::PostInitAllocs),
            drops: c(Counter::Drops),
            rate_millihz: c(Counter::RateMilliHz),
            leased_slot: c(Counter::LeasedSlot),
            backend_ns: c(Counter::BackendNs),
        }
    }

    fn token(&self) -> &AtomicU32 {
        self.region.u32_at(OFF_TOKEN)
    }

    /// Blocks until worker `owner` holds the global execution token. `idle`
    /// runs between waits (at least every 50 ms) so callers can heartbeat.
    pub fn acquire_token(&self, owner: u32, mut idle: impl FnMut()) -> TokenGuard<'_> {
        let token = self.token();
        let waiters = self.region.u32_at(OFF_TOKEN_WAITERS);
        loop {
            if token
                .compare_exchange(0, owner + 1, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return TokenGuard { block: self };
            }
            let held = token.load(Ordering::Acquire);
            waiters.fetch_add(1, Ordering::SeqCst);
            if held != 0 {
                futex::wait(token, held, Duration::from_millis(50));
            }
            waiters.fetch_sub(1, Ordering::SeqCst);
            idle();
        }
    }

    pub fn token_held(&self) -> bool {
        self.token().load(Ordering::Acquire) != 0
    }

    /// Worker currently holding the token.
    pub fn token_owner(&self) -> Option<u32> {
        self.token().load(Ordering::Acquire).checked_sub(1)
    }

    /// Releases the token if a dead worker `owner` left it held.
    pub fn release_token_of(&self, owner: u32) -> bool {
        let ok = self
            .token()
            .compare_exchange(owner + 1, 0, Ordering::AcqRel, Ordering::Acquire)
            .is_ok();
        if ok {
            futex::wake_all(self.token());
        }
        ok
    }

    fn release_token(&self) {
        self.token().store(0, Ordering::Release);
        if self.region.u32_at(OFF_TOKEN_WAITERS).load(Ordering::SeqCst) > 0 {
            futex::wake_all(self.token());
        }
    }

    fn progress(&self) -> &AtomicU32 {
        self.region.u32_at(OFF_PROGRESS)
    }

    pub fn progress_value(&self) -> u32 {
        self.progress().load(Ordering::SeqCst)
    }

    /// Announces that some worker produced output.
    pub fn ring_progress(&self) {
        self.progress().fetch_add(1, Ordering::SeqCst);
        if self.region.u32_at(OFF_PROGRESS_WAITERS).load(Ordering::SeqCst) > 0 {
            futex::wake_all(self.progress());
        }
    }

    pub fn wait_progress(&self, seen: u32, timeout: Duration) {
        let waiters = self.region.u32_at(OFF_PROGRESS_WAITERS);
        waiters.fetch_add(1, Ordering::SeqCst);
        futex::wait(self.progress(), seen, timeout);
        waiters.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct TokenGuard<'a> {
    block: &'a ControlBlock,
}

impl Drop for TokenGuard<'_> {
    fn drop(&mut self) {
        self.block.release_token();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::TestNamespace;
    use std::sync::atomic::AtomicBool;
    use std::sync::Arc;

    #[test]
    fn records_are_shared_between_mappings() {
        let ns = TestNamespace::new();
        let a = ControlBlock::create(ns.name()).unwrap();
        let b = ControlBlock::open(ns.name()).unwrap();
        a.set_pid(3, 42);
        a.set_state(3, WorkerState::Running);
        a.add(3, Counter::Outputs, 5);
        a.heartbeat(3);
        let snap = b.snapshot(3);
        assert_eq!((snap.pid, snap.outputs), (42, 5));
        assert!(snap.last_seen > 0);
        assert_eq!(b.state(3), WorkerState::Running);
        assert_eq!(b.state(4), WorkerState::Starting);
        assert!(matches!(ControlBlock::create(ns.name()), Err(Error::AlreadyExists(_))));
    }

    #[test]
    fn last_seen_is_monotonic() {
        let ns = TestNamespace::new();
        let block = ControlBlock::create(ns.name()).unwrap();
        block.heartbeat(0);
        let first = block.counter(0, Counter::LastSeen);
        block.counter_at(0, Counter::LastSeen).fetch_max(1, Ordering::AcqRel);
        assert_eq!(block.counter(0, Counter::LastSeen), first);
    }

    #[test]
    fn token_is_mutually_exclusive() {
        let ns = TestNamespace::new();
        let block = Arc::new(ControlBlock::create(ns.name()).unwrap());
        let inside = Arc::new(AtomicBool::new(false));
        let handles: Vec<_> = (0..4u32)
            .map(|owner| {
                let block = block.clone();
                let inside = inside.clone();
                std::thread::spawn(move || {
                    for _ in 0..200 {
                        let _g = block.acquire_token(owner, || {});
                        assert_eq!(block.token_owner(), Some(owner));
                        assert!(!inside.swap(true, Ordering::SeqCst));
                        std::hint::spin_loop();
                        inside.store(false, Ordering::SeqCst);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(!block.token_held());
        let g = block.acquire_token(7, || {});
        std::mem::forget(g);
        assert!(!block.release_token_of(6));
        assert!(block.release_token_of(7));
        assert!(!block.token_held());
    }
}
