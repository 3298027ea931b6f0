use fanout_core::shm;
use fanout_core::stress::{check_fifo_model, check_latest_model, stress_fifo, stress_latest};
use proptest::prelude::*;

struct Namespace(String);

impl Namespace {
    fn new() -> Self {
        Namespace(shm::new_namespace())
    }
}

impl Drop for Namespace {
    fn drop(&mut self) {
        let _ = shm::remove_namespace(&self.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn fifo_matches_bounded_queue(seed in any::<u64>(), capacity in 2u32..8, ops in 1usize..400) {
        let ns = Namespace::new();
        check_fifo_model(&ns.0, seed, ops, capacity).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn latest_matches_sequential_oracle(
        seed in any::<u64>(),
        capacity in 2u32..7,
        consumers in 1u32..5,
        ops in 1usize..400,
    ) {
        let ns = Namespace::new();
        check_latest_model(&ns.0, seed, ops, capacity, consumers).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn latest_survives_a_million_frames_without_torn_reads() {
    let ns = Namespace::new();
    let r = stress_latest(&ns.0, 1_000_000, 3, 0x5eed).unwrap();
    assert!(r.passed(), "{r:?}");
    assert!(r.reads_checked > 0);
    let s = r.stats;
    assert_eq!(s.pushed, 1_000_000);
    assert_eq!(s.accepted, s.evictions + s.popped + s.resident);
}

#[test]
fn fifo_preserves_order_over_a_million_frames() {
    let ns = Namespace::new();
    let r = stress_fifo(&ns.0, 1_000_000, 8, 0x5eed).unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(r.stats.popped + r.stats.producer_drops, 1_000_000);
}
