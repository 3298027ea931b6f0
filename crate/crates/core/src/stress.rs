//! Randomized channel checks: step-by-step comparison against sequential
//! models, and a multi-threaded stress run that detects torn reads.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channels::{create_channel, open_channel, Channel, ChannelMode, ChannelSpec, ChannelStats, Lease, PushOutcome, SlotGroup};
use crate::error::Result;
use crate::tensor_arena::{create_arena, Arena, ArenaLayout, DType, TensorSpec};

const LABELS: [&str; 2] = ["a", "b"];
const WORDS: usize = 64;

fn word(frame: u64, label: usize, i: usize) -> u64 {
    frame.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((label as u64) << 56) ^ i as u64
}

fn spec(label: &str) -> TensorSpec {
    TensorSpec::new(label, DType::I64, &[WORDS]).expect("static spec")
}

fn channel_spec(name: &str, mode: ChannelMode, capacity: u32) -> ChannelSpec {
    ChannelSpec {
        name: name.into(),
        mode,
        capacity,
        specs: LABELS.iter().map(|l| spec(l)).collect(),
    }
}

fn processing(namespace: &str, name: &str) -> Result<Arena> {
    let layout = ArenaLayout::new(LABELS.iter().enumerate().map(|(i, l)| (i as u32, spec(l))).collect())?;
    Ok(create_arena(&layout, namespace, name)?.0)
}

fn push(ch: &Channel, frame: u64) -> Result<PushOutcome> {
    ch.push(frame, frame, |w| {
        for (l, t) in w.tensors_mut()?.into_iter().enumerate() {
            for (i, chunk) in t.chunks_exact_mut(8).enumerate() {
                chunk.copy_from_slice(&word(frame, l, i).to_le_bytes());
            }
        }
        Ok(())
    })
}

/// True when `bytes` hold exactly the payload of `frame` for `label`.
fn intact(bytes: &[u8], frame: u64, label: usize) -> bool {
    bytes
        .chunks_exact(8)
        .enumerate()
        .all(|(i, c)| u64::from_le_bytes(c.try_into().unwrap()) == word(frame, label, i))
}

/// Pushes and pops random sequences on a FIFO channel, comparing every
/// outcome with a bounded queue.
pub fn check_fifo_model(namespace: &str, seed: u64, ops: usize, capacity: u32) -> std::result::Result<(), String> {
    let err = |e: crate::Error| e.to_string();
    let (ch, _) = create_channel(&channel_spec(&format!("fifo-{seed}"), ChannelMode::Fifo, capacity), namespace, 1).map_err(err)?;
    let mut ch = ch;
    ch.register_consumer(1).map_err(err)?;
    let dst = processing(namespace, &format!("fifo-dst-{seed}")).map_err(err)?;
    let group = SlotGroup::new(&dst, dst.slots());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: VecDeque<u64> = VecDeque::new();
    let (mut frame, mut drops, mut popped) = (0u64, 0u64, 0u64);
    for step in 0..ops {
        if rng.gen_bool(0.55) {
            frame += 1;
            let got = push(&ch, frame).map_err(err)?;
            let want = if model.len() < capacity as usize {
                model.push_back(frame);
                PushOutcome::Accepted
            } else {
                drops += 1;
                PushOutcome::OverflowRejected
            };
            if got != want {
                return Err(format!("step {step}: push {frame} gave {got:?}, model {want:?}"));
            }
        } else {
            let got = ch.pop_fifo(1, &group, false).ok().map(|e| e.frame_id);
            let want = model.pop_front();
            if got != want {
                return Err(format!("step {step}: pop gave {got:?}, model {want:?}"));
            }
            if let Some(f) = got {
                popped += 1;
                for (l, s) in dst.slots().iter().enumerate() {
                    if !intact(dst.read_view(s).map_err(err)?.as_bytes(), f, l) {
                        return Err(format!("step {step}: popped frame {f} corrupted"));
                    }
                }
            }
        }
        let stats = ch.stats();
        let want = ChannelStats {
            pushed: frame,
            accepted: frame - drops,
            producer_drops: drops,
            evictions: 0,
            popped,
            writer_errors: 0,
            resident: model.len() as u64,
        };
        if stats != want || !stats.conserved() {
            return Err(format!("step {step}: stats {stats:?}, model {want:?}"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ModelSlot {
    Free,
    Ready(u64),
    Leased(u64, u32),
}

impl ModelSlot {
    fn frame(self) -> Option<u64> {
        match self {
            ModelSlot::Free => None,
            ModelSlot::Ready(f) | ModelSlot::Leased(f, _) => Some(f),
        }
    }
}

/// Random pushes, leases, consumes and abandoned leases on a LATEST channel
/// with `consumers` readers, checked against a sequential slot model.
pub fn check_latest_model(
    namespace: &str,
    seed: u64,
    ops: usize,
    capacity: u32,
    consumers: u32,
) -> std::result::Result<(), String> {
    let err = |e: crate::Error| e.to_string();
    let (mut ch, _) = create_channel(&channel_spec(&format!("latest-{seed}"), ChannelMode::Latest, capacity), namespace, consumers as usize)
        .map_err(err)?;
    for c in 1..=consumers {
        ch.register_consumer(c).map_err(err)?;
    }
    let dst = processing(namespace, &format!("latest-dst-{seed}")).map_err(err)?;
    let group = SlotGroup::new(&dst, dst.slots());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = vec![ModelSlot::Free; capacity as usize];
    let mut cursors = vec![0u64; consumers as usize];
    let mut leases: Vec<Option<Lease<'_>>> = (0..consumers).map(|_| None).collect();
    let (mut frame, mut drops, mut evictions) = (0u64, 0u64, 0u64);
    for step in 0..ops {
        let c = rng.gen_range(0..consumers as usize);
        match rng.gen_range(0..10) {
            0..=3 => {
                frame += 1;
                let got = push(&ch, frame).map_err(err)?;
                let want = if let Some(s) = slots.iter().position(|s| *s == ModelSlot::Free) {
                    slots[s] = ModelSlot::Ready(frame);
                    PushOutcome::Accepted
                } else if let Some((s, old)) = slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| match s {
                        ModelSlot::Ready(f) => Some((i, *f)),
                        _ => None,
                    })
                    .min_by_key(|&(_, f)| f)
                {
                    slots[s] = ModelSlot::Ready(frame);
                    evictions += 1;
                    PushOutcome::AcceptedEvicting(old)
                } else {
                    drops += 1;
                    PushOutcome::OverflowRejected
                };
                if got != want {
                    return Err(format!("step {step}: push {frame} gave {got:?}, model {want:?}"));
                }
            }
            4..=6 if leases[c].is_none() => {
                let got = ch.acquire_latest(c as u32 + 1).map_err(err)?;
                let want = slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| s.frame().map(|f| (i, f)))
                    .filter(|&(_, f)| f > cursors[c])
                    .max_by_key(|&(_, f)| f);
                match (&got, want) {
                    (None, None) => {}
                    (Some(l), Some((s, f))) if l.slot() == s && l.frame_id() == f => {
                        slots[s] = match slots[s] {
                            ModelSlot::Ready(f) => ModelSlot::Leased(f, 1),
                            ModelSlot::Leased(f, n) => ModelSlot::Leased(f, n + 1),
                            ModelSlot::Free => unreachable!(),
                        };
                        for (li, label) in LABELS.iter().enumerate() {
                            if !intact(l.view(label).map_err(err)?.as_bytes(), f, li) {
                                return Err(format!("step {step}: view of frame {f} corrupted"));
                            }
                        }
                    }
                    _ => {
                        return Err(format!(
                            "step {step}: consumer {c} acquired {:?}, model {want:?}",
                            got.as_ref().map(|l| (l.slot(), l.frame_id()))
                        ))
                    }
                }
                leases[c] = got;
            }
            7..=8 => {
                if let Some(mut lease) = leases[c].take() {
                    let (s, f) = (lease.slot(), lease.frame_id());
                    let label = LABELS[rng.gen_range(0..LABELS.len())];
                    lease.consume(&group, &[label]).map_err(err)?;
                    let li = LABELS.iter().position(|l| *l == label).unwrap();
                    let dst_slot = group.get(label).unwrap();
                    if !intact(dst.read_view(dst_slot).map_err(err)?.as_bytes(), f, li) {
                        return Err(format!("step {step}: consumed frame {f} corrupted"));
                    }
                    cursors[c] = cursors[c].max(f);
                    release(&mut slots[s]);
                }
            }
            _ => {
                if let Some(lease) = leases[c].take() {
                    release(&mut slots[lease.slot()]);
                }
            }
        }
        for (c, cur) in cursors.iter().enumerate() {
            if ch.cursor(c as u32 + 1).map_err(err)? != *cur {
                return Err(format!("step {step}: cursor of consumer {c} diverged"));
            }
        }
        let stats = ch.stats();
        let resident = slots.iter().filter(|s| **s != ModelSlot::Free).count() as u64;
        if stats.evictions != evictions || stats.producer_drops != drops || stats.resident != resident || !stats.conserved() {
            return Err(format!(
                "step {step}: stats {stats:?}, model evictions {evictions} drops {drops} resident {resident}"
            ));
        }
    }
    Ok(())
}

fn release(slot: &mut ModelSlot) {
    *slot = match *slot {
        ModelSlot::Leased(f, 1) => ModelSlot::Ready(f),
        ModelSlot::Leased(f, n) => ModelSlot::Leased(f, n - 1),
        other => other,
    };
}

#[derive(Clone, Debug, Default)]
pub struct StressReport {
    pub frames: u64,
    /// Frames each consumer obtained.
    pub consumed: Vec<u64>,
    /// Tensor reads compared against their expected payload.
    pub reads_checked: u64,
    pub torn_reads: u64,
    /// Frames seen out of increasing order (LATEST) or out of push order (FIFO).
    pub order_violations: u64,
    pub stats: ChannelStats,
    pub conserved: bool,
    pub elapsed: Duration,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.torn_reads == 0 && self.order_violations == 0 && self.conserved && self.consumed.iter().all(|&n| n > 0)
    }
}

/// One producer and `consumers` threads on a LATEST channel, each with its
/// own mapping. Consumers hold leases for random spans, read in place and
/// copy out random label subsets, verifying every byte.
pub fn stress_latest(namespace: &str, frames: u64, consumers: u32, seed: u64) -> Result<StressReport> {
    let (mut producer, handle) =
        create_channel(&channel_spec("stress-latest", ChannelMode::Latest, consumers + 2), namespace, consumers as usize)?;
    for c in 1..=consumers {
        producer.register_consumer(c)?;
    }
    let done = AtomicBool::new(false);
    let started = Instant::now();
    let mut report = std::thread::scope(|scope| -> Result<StressReport> {
        let workers: Vec<_> = (1..=consumers)
            .map(|c| {
                let handle = handle.clone();
                let done = &done;
                scope.spawn(move || -> Result<(u64, u64, u64, u64)> {
                    let ch = open_channel(&handle)?;
                    let dst = processing(namespace, &format!("stress-dst-{c}"))?;
                    let group = SlotGroup::new(&dst, dst.slots());
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ c as u64);
                    let (mut got, mut checked, mut torn, mut disorder, mut last) = (0, 0, 0, 0, 0u64);
                    loop {
                        let finished = done.load(Ordering::Acquire);
                        let bell = ch.doorbell_value();
                        let Some(mut lease) = ch.acquire_latest(c)? else {
                            if finished {
                                break;
                            }
                            ch.wait_for_push(bell, Duration::from_millis(1));
                            continue;
                        };
                        let f = lease.frame_id();
                        if f <= last {
                            disorder += 1;
                        }
                        last = f;
                        got += 1;
                        if rng.gen_bool(0.5) {
                            for (li, label) in LABELS.iter().enumerate() {
                                checked += 1;
                                torn += u64::from(!intact(lease.view(label)?.as_bytes(), f, li));
                            }
                        }
                        for _ in 0..rng.gen_range(0..4) {
                            std::thread::yield_now();
                        }
                        let pick: Vec<&str> = match rng.gen_range(0..3) {
                            0 => vec!["a"],
                            1 => vec!["b"],
                            _ => LABELS.to_vec(),
                        };
                        lease.consume(&group, &pick)?;
                        for label in pick {
                            let li = LABELS.iter().position(|l| *l == label).unwrap();
                            checked += 1;
                            torn += u64::from(!intact(dst.read_view(group.get(label).unwrap())?.as_bytes(), f, li));
                        }
                    }
                    Ok((got, checked, torn, disorder))
                })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in 1..=frames {
            push(&producer, f)?;
            if rng.gen_ratio(1, 3) {
                std::thread::yield_now();
            }
        }
        done.store(true, Ordering::Release);
        let mut report = StressReport {
            frames,
            ..Default::default()
        };
        for w in workers {
            let (got, checked, torn, disorder) = w.join().expect("consumer thread panicked")?;
            report.consumed.push(got);
            report.reads_checked += checked;
            report.torn_reads += torn;
            report.order_violations += disorder;
        }
        Ok(report)
    })?;
    report.elapsed = started.elapsed();
    report.stats = producer.stats();
    report.conserved = report.stats.conserved() && report.stats.pushed == frames;
    Ok(report)
}

/// One producer and one popping consumer on a FIFO channel. Every accepted
/// frame must come out once, intact and in push order.
pub fn stress_fifo(namespace: &str, frames: u64, capacity: u32, seed: u64) -> Result<StressReport> {
    let (mut producer, handle) = create_channel(&channel_spec("stress-fifo", ChannelMode::Fifo, capacity), namespace, 1)?;
    producer.register_consumer(1)?;
    let done = AtomicBool::new(false);
    let started = Instant::now();
    let (accepted, popped, checked, torn) = std::thread::scope(|scope| -> Result<_> {
        let consumer = scope.spawn(|| -> Result<(Vec<u64>, u64, u64)> {
            let ch = open_channel(&handle)?;
            let dst = processing(namespace, "stress-fifo-dst")?;
            let group = SlotGroup::new(&dst, dst.slots());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1f0);
            let (mut out, mut checked, mut torn) = (Vec::with_capacity(frames as usize), 0, 0);
            loop {
                let finished = done.load(Ordering::Acquire);
                let bell = ch.doorbell_value();
                match ch.pop_fifo(1, &group, false) {
                    Ok(env) => {
                        out.push(env.frame_id);
                        if rng.gen_ratio(1, 4) {
                            for (li, s) in dst.slots().iter().enumerate() {
                                checked += 1;
                                torn += u64::from(!intact(dst.read_view(s)?.as_bytes(), env.frame_id, li));
                            }
                        }
                        if rng.gen_ratio(1, 32) {
                            std::thread::yield_now();
                        }
                    }
                    Err(crate::Error::Empty) if finished => break,
                    Err(crate::Error::Empty) => ch.wait_for_push(bell, Duration::from_millis(1)),
                    Err(e) => return Err(e),
                }
            }
            Ok((out, checked, torn))
        });
        let mut accepted = Vec::with_capacity(frames as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in 1..=frames {
            if push(&producer, f)?.accepted() {
                accepted.push(f);
            }
            if rng.gen_ratio(1, 3) {
                std::thread::yield_now();
            }
        }
        done.store(true, Ordering::Release);
        let (popped, checked, torn) = consumer.join().expect("consumer thread panicked")?;
        Ok((accepted, popped, checked, torn))
    })?;
    let stats = producer.stats();
    Ok(StressReport {
        frames,
        consumed: vec![popped.len() as u64],
        reads_checked: checked,
        torn_reads: torn,
        order_violations: u64::from(popped != accepted),
        conserved: stats.conserved() && stats.pushed == frames && stats.popped == popped.len() as u64,
        stats,
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::TestNamespace;

    #[test]
    fn models_agree_on_short_runs() {
        let ns = TestNamespace::new();
        for seed in 0..4 {
            check_fifo_model(ns.name(), seed, 300, 3).unwrap();
            check_latest_model(ns.name(), seed, 300, 3, 2).unwrap();
        }
    }

    #[test]
    fn short_stress_runs_pass() {
        let ns = TestNamespace::new();
        let r = stress_latest(ns.name(), 5_000, 2, 7).unwrap();
        assert!(r.passed(), "{r:?}");
        let r = stress_fifo(ns.name(), 5_000, 4, 7).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.stats.popped + r.stats.producer_drops, 5_000);
    }
}
