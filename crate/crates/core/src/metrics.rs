//! Merging of per-process metrics buffers into per-frame records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::pipeline::worker::MetricRow;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct HeadOutput {
    pub t_output: u64,
    pub backend_ns: u64,
}

/// Timeline of one frame across the whole pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MetricsRecord {
    pub frame_id: u64,
    /// Time the source began writing the frame into the input channel.
    pub t_inserted: u64,
    pub fm_backend_ns: Option<u64>,
    /// Indexed like `MergedMetrics::heads`.
    pub heads: Vec<Option<HeadOutput>>,
}

impl MetricsRecord {
    pub fn is_complete(&self) -> bool {
        self.fm_backend_ns.is_some() && self.heads.iter().all(Option::is_some)
    }

    /// Insertion to the moment the last head returned.
    pub fn latency_ns(&self) -> Option<u64> {
        let last = self.heads.iter().map(|h| h.map(|h| h.t_output)).collect::<Option<Vec<_>>>()?;
        Some(last.into_iter().max()?.saturating_sub(self.t_inserted))
    }

    /// Backend time along the slowest path: foundation plus slowest head.
    pub fn backend_path_ns(&self) -> Option<u64> {
        let slowest = self.heads.iter().map(|h| h.map(|h| h.backend_ns)).collect::<Option<Vec<_>>>()?;
        Some(self.fm_backend_ns? + slowest.into_iter().max()?)
    }

    /// Latency not explained by backend work.
    pub fn overhead_ns(&self) -> Option<i64> {
        Some(self.latency_ns()? as i64 - self.backend_path_ns()? as i64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MergedMetrics {
    pub heads: Vec<String>,
    pub records: Vec<MetricsRecord>,
}

impl MergedMetrics {
    /// `heads` pairs each head name with its rows.
    pub fn merge(source: &[MetricRow], fm: &[MetricRow], heads: &[(String, Vec<MetricRow>)]) -> MergedMetrics {
        let mut by_frame: BTreeMap<u64, MetricsRecord> = source
            .iter()
            .map(|r| {
                (
                    r.frame_id,
                    MetricsRecord {
                        frame_id: r.frame_id,
                        t_inserted: r.t0,
                        fm_backend_ns: None,
                        heads: vec![None; heads.len()],
                    },
                )
            })
            .collect();
        for r in fm {
            if let Some(rec) = by_frame.get_mut(&r.frame_id) {
                rec.fm_backend_ns = Some(r.backend_ns);
            }
        }
        for (i, (_, rows)) in heads.iter().enumerate() {
            for r in rows {
                if let Some(rec) = by_frame.get_mut(&r.frame_id) {
                    rec.heads[i] = Some(HeadOutput {
                        t_output: r.t1,
                        backend_ns: r.backend_ns,
                    });
                }
            }
        }
        MergedMetrics {
            heads: heads.iter().map(|(n, _)| n.clone()).collect(),
            records: by_frame.into_values().collect(),
        }
    }

    pub fn complete(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.is_complete())
    }

    pub fn latencies_ns(&self) -> Vec<u64> {
        self.complete().filter_map(MetricsRecord::latency_ns).collect()
    }

    pub fn overheads_ns(&self) -> Vec<i64> {
        self.complete().filter_map(MetricsRecord::overhead_ns).collect()
    }

    pub fn outputs_per_head(&self) -> Vec<usize> {
        (0..self.heads.len())
            .map(|i| self.records.iter().filter(|r| r.heads[i].is_some()).count())
            .collect()
    }

    /// Long-format CSV, one row per (frame, head) output.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_id,t_inserted,head,t_output,latency_ns,backend_ns\n");
        for r in &self.records {
            for (name, h) in self.heads.iter().zip(&r.heads) {
                if let Some(h) = h {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        r.frame_id,
                        r.t_inserted,
                        name,
                        h.t_output,
                        h.t_output.saturating_sub(r.t_inserted),
                        h.backend_ns
                    );
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Median of a sample; `None` when empty.
pub fn median<T: Copy + Ord>(values: &[T]) -> Option<T> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.get(v.len() / 2).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(frame_id: u64, t0: u64, t1: u64, backend_ns: u64) -> MetricRow {
        MetricRow { frame_id, t0, t1, backend_ns }
    }

    #[test]
    fn merge_and_account_latency() {
        let source = [row(1, 10, 12, 0), row(2, 110, 112, 0)];
        let fm = [row(1, 10, 30, 15), row(2, 110, 130, 15)];
        let heads = vec![
            ("a".to_string(), vec![row(1, 0, 50, 20), row(2, 0, 160, 20)]),
            ("b".to_string(), vec![row(1, 0, 60, 25)]),
        ];
        let m = MergedMetrics::merge(&source, &fm, &heads);
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.outputs_per_head(), vec![2, 1]);
        let first = &m.records[0];
        assert_eq!(first.latency_ns(), Some(50));
        assert_eq!(first.backend_path_ns(), Some(40));
        assert_eq!(first.overhead_ns(), Some(10));
        assert!(!m.records[1].is_complete());
        assert_eq!(m.latencies_ns(), vec![50]);
        let csv = m.to_csv();
        assert!(csv.starts_with("frame_id,t_inserted,head,t_output,latency_ns,backend_ns\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("1,10,b,60,50,25"));
    }

    #[test]
    fn median_picks_upper_middle() {
        assert_eq!(median(&[3, 1, 2]), Some(2));
        assert_eq!(median(&[4, 1, 3, 2]), Some(3));
        assert_eq!(median::<u64>(&[]), None);
    }
}
