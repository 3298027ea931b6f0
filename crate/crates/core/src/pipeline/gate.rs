//! Deadline-based admission gate bounding how often a head runs.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rate {
    Hz(f64),
    Unlimited,
}

impl Rate {
    pub fn validate(self) -> Result<Rate> {
        match self {
            Rate::Hz(hz) if !(hz.is_finite() && hz > 0.0) => {
                Err(Error::Config(format!("rate must be positive, got {hz}")))
            }
            r => Ok(r),
        }
    }

    pub fn period_ns(self) -> Option<u64> {
        match self {
            Rate::Hz(hz) => Some((1e9 / hz).round().max(1.0) as u64),
            Rate::Unlimited => None,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Hz(hz) => write!(f, "{hz}"),
            Rate::Unlimited => f.write_str("unlimited"),
        }
    }
}

impl std::str::FromStr for Rate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Rate> {
        if s.eq_ignore_ascii_case("unlimited") {
            return Ok(Rate::Unlimited);
        }
        s.parse::<f64>()
            .map(Rate::Hz)
            .map_err(|_| Error::Config(format!("bad rate {s:?}")))?
            .validate()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RateRepr {
    Hz(f64),
    Word(String),
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Hz(hz) => RateRepr::Hz(*hz),
            Rate::Unlimited => RateRepr::Word("unlimited".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Rate, D::Error> {
        match RateRepr::deserialize(d)? {
            RateRepr::Hz(hz) => Rate::Hz(hz).validate(),
            RateRepr::Word(w) => w.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Admits an event iff `now >= next_deadline`. After an admit the deadline
/// advances by one period, but never falls more than one period behind
/// `now`, so a stalled head catches up by at most one extra event. The
/// first admit anchors the deadline grid.
#[derive(Clone, Debug)]
pub struct RateGate {
    rate: Rate,
    next_deadline: u64,
}

impl RateGate {
    pub fn new(rate: Rate) -> Result<Self> {
        Ok(RateGate {
            rate: rate.validate()?,
            next_deadline: 0,
        })
    }

    pub fn rate(&self) -> Rate {
        self.rate
    }

    pub fn next_deadline(&self) -> u64 {
        self.next_deadline
    }

    pub fn is_open(&self, now: u64) -> bool {
        self.rate == Rate::Unlimited || now >= self.next_deadline
    }

    /// Time left before the gate opens.
    pub fn wait_time(&self, now: u64) -> Duration {
        if self.is_open(now) {
            Duration::ZERO
        } else {
            Duration::from_nanos(self.next_deadline - now)
        }
    }

    pub fn admit(&mut self, now: u64) -> bool {
        let Some(period) = self.rate.period_ns() else {
            return true;
        };
        if now < self.next_deadline {
            return false;
        }
        self.next_deadline = if self.next_deadline == 0 {
            now + period
        } else {
            self.next_deadline.max(now.saturating_sub(period)) + period
        };
        true
    }

    /// Changes the rate; the deadline re-bases to `now`.
    pub fn set_rate(&mut self, rate: Rate, now: u64) -> Result<()> {
        let rate = rate.validate()?;
        if rate != self.rate {
            self.rate = rate;
            self.next_deadline = now;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SEC: u64 = 1_000_000_000;

    fn count(gate: &mut RateGate, times: impl IntoIterator<Item = u64>) -> usize {
        times.into_iter().filter(|&t| gate.admit(t)).count()
    }

    #[test]
    fn five_hz_over_ten_seconds_of_100hz_events() {
        let mut gate = RateGate::new(Rate::Hz(5.0)).unwrap();
        let admitted = count(&mut gate, (0..1000).map(|i| i * 10_000_000));
        assert!((49..=51).contains(&admitted), "{admitted}");
    }

    #[test]
    fn thirty_hz_gate_on_thirty_hz_stream() {
        let mut gate = RateGate::new(Rate::Hz(30.0)).unwrap();
        let admitted = count(&mut gate, (0..300u64).map(|k| (k as f64 * 1e9 / 30.0).round() as u64));
        assert!((299..=301).contains(&admitted), "{admitted}");
    }

    #[test]
    fn unlimited_admits_everything() {
        let mut gate = RateGate::new(Rate::Unlimited).unwrap();
        assert_eq!(count(&mut gate, [5, 5, 5, 6]), 4);
    }

    #[test]
    fn set_rate_mid_run() {
        let mut gate = RateGate::new(Rate::Hz(30.0)).unwrap();
        let events = |from: u64, n: u64| (0..n).map(move |i| from + i * 10_000_000);
        count(&mut gate, events(0, 500));
        gate.set_rate(Rate::Hz(5.0), 5 * SEC).unwrap();
        let admitted = count(&mut gate, events(5 * SEC, 1000));
        assert!((48..=52).contains(&admitted), "{admitted}");
        // Same rate again changes nothing.
        let before = gate.next_deadline();
        gate.set_rate(Rate::Hz(5.0), 99 * SEC).unwrap();
        assert_eq!(gate.next_deadline(), before);
        assert!(gate.set_rate(Rate::Hz(0.0), 0).is_err());
        assert!(gate.set_rate(Rate::Hz(-1.0), 0).is_err());
    }

    #[test]
    fn catch_up_is_bounded_to_one_period() {
        let mut gate = RateGate::new(Rate::Hz(10.0)).unwrap();
        assert!(gate.admit(0));
        // Long stall, then a burst of events at the same instant.
        let burst = count(&mut gate, std::iter::repeat_n(10 * SEC, 10));
        assert_eq!(burst, 2);
        assert!(!gate.admit(10 * SEC + SEC / 20));
        assert!(gate.admit(10 * SEC + SEC / 10));
    }

    #[test]
    fn rate_parses_and_serializes() {
        assert_eq!("unlimited".parse::<Rate>().unwrap(), Rate::Unlimited);
        assert_eq!("12.5".parse::<Rate>().unwrap(), Rate::Hz(12.5));
        assert!("0".parse::<Rate>().is_err());
        assert_eq!(serde_json::to_string(&Rate::Hz(5.0)).unwrap(), "5.0");
        assert_eq!(serde_json::from_str::<Rate>("\"unlimited\"").unwrap(), Rate::Unlimited);
        assert!(serde_json::from_str::<Rate>("-3").is_err());
    }

    proptest! {
        #[test]
        fn sliding_window_bound(
            hz in 1.0f64..60.0,
            gaps in proptest::collection::vec(0u64..80_000_000, 1..400),
            window_ms in 50u64..3000,
        ) {
            let mut gate = RateGate::new(Rate::Hz(hz)).unwrap();
            let mut t = 0;
            let mut admitted = Vec::new();
            for g in gaps {
                t += g;
                if gate.admit(t) {
                    admitted.push(t);
                }
            }
            let w = window_ms * 1_000_000;
            let bound = (hz * w as f64 / 1e9).ceil() as usize + 1;
            for (i, &start) in admitted.iter().enumerate() {
                let inside = admitted[i..].iter().take_while(|&&x| x < start + w).count();
                prop_assert!(inside <= bound, "{} admits in {} ms at {} Hz", inside, window_ms, hz);
            }
        }

        #[test]
        fn dense_stream_tracks_rate(hz in 1.0f64..50.0, secs in 1u64..20) {
            // Events every millisecond: outputs stay within [floor(rT)-1, ceil(rT)+1].
            let mut gate = RateGate::new(Rate::Hz(hz)).unwrap();
            let n = count(&mut gate, (0..secs * 1000).map(|i| i * 1_000_000)) as f64;
            let ideal = hz * secs as f64;
            prop_assert!(n >= ideal.floor() - 1.0 && n <= ideal.ceil() + 1.0, "{} vs {}", n, ideal);
        }
    }
}
