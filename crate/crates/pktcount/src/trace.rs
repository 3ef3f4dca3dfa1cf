//! Packet traces and their aggregation into fixed-duration count windows.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RadioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub beacon_id: u32,
    pub t_ms: i64,
}

/// Ordered log of (beacon, timestamp) reception events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PacketTrace {
    pub events: Vec<PacketEvent>,
}

impl PacketTrace {
    pub fn new(events: Vec<PacketEvent>) -> Result<Self> {
        if events.windows(2).any(|w| w[1].t_ms < w[0].t_ms) {
            return Err(Error::InvalidArgument("trace timestamps must be non-decreasing".into()));
        }
        Ok(PacketTrace { events })
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_csv_file(&self, path: &Path) -> Result<()> {
        let mut out = String::from("beacon_id,t_ms\n");
        for e in &self.events {
            out.push_str(&format!("{},{}\n", e.beacon_id, e.t_ms));
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        {
            let headers = rdr.headers()?;
            if headers.len() < 2 || &headers[0] != "beacon_id" || &headers[1] != "t_ms" {
                return Err(Error::Malformed {
                    line: 1,
                    msg: format!("expected header beacon_id,t_ms, got {:?}", headers),
                });
            }
        }
        let mut events = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let beacon_id: u32 = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Malformed { line, msg: "bad beacon_id".into() })?;
            let t_ms: i64 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Malformed { line, msg: "bad t_ms".into() })?;
            events.push(PacketEvent { beacon_id, t_ms });
        }
        if events.windows(2).any(|w| w[1].t_ms < w[0].t_ms) {
            return Err(Error::Malformed { line: 0, msg: "timestamps not ascending".into() });
        }
        Ok(PacketTrace { events })
    }
}

/// Per-window per-beacon packet counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedCounts {
    pub window_index: usize,
    pub t_start_ms: i64,
    /// beacon id -> received count, clamped to n_sent.
    pub counts: BTreeMap<u32, u32>,
    /// Nominal packets sent per beacon this window.
    pub n_sent: u32,
    /// Events discarded by clamping counts to n_sent.
    pub overflow: u32,
}

impl WindowedCounts {
    pub fn count(&self, beacon_id: u32) -> u32 {
        self.counts.get(&beacon_id).copied().unwrap_or(0)
    }
}

/// Aggregate a trace into windows of length `window_s`, anchored at the first
/// event timestamp. Counts above N = round(f * delta) clamp, with the clamped
/// excess reported per window.
pub fn window_counts(trace: &PacketTrace, config: &RadioConfig) -> Result<Vec<WindowedCounts>> {
    window_counts_impl(trace, config, None)
}

/// Like [`window_counts`] but with a known trace duration: the final window is
/// truncated at `duration_ms` past the first event; if shorter than half a
/// window it is dropped, otherwise its packet budget scales as
/// round(f * actual length).
pub fn window_counts_with_duration(
    trace: &PacketTrace,
    config: &RadioConfig,
    duration_ms: i64,
) -> Result<Vec<WindowedCounts>> {
    window_counts_impl(trace, config, Some(duration_ms))
}

fn window_counts_impl(
    trace: &PacketTrace,
    config: &RadioConfig,
    duration_ms: Option<i64>,
) -> Result<Vec<WindowedCounts>> {
    if trace.events.is_empty() {
        return Ok(Vec::new());
    }
    let delta_ms = (config.window_s * 1000.0).round() as i64;
    if delta_ms <= 0 {
        return Err(Error::InvalidArgument("window_s too small".into()));
    }
    let t0 = trace.events[0].t_ms;
    let n_full = config.packets_per_window();

    let span_ms = duration_ms.unwrap_or(trace.events.last().unwrap().t_ms - t0 + 1);
    let mut n_windows = (span_ms as f64 / delta_ms as f64).ceil() as usize;
    let mut last_n_sent = n_full;
    if let Some(dur) = duration_ms {
        let rem = dur - (n_windows as i64 - 1) * delta_ms;
        if rem < delta_ms {
            if rem * 2 < delta_ms {
                n_windows -= 1; // final sliver dropped
            } else {
                last_n_sent = (config.freq_hz * rem as f64 / 1000.0).round().max(1.0) as u32;
            }
        }
    }
    if n_windows == 0 {
        return Ok(Vec::new());
    }

    let mut windows: Vec<WindowedCounts> = (0..n_windows)
        .map(|k| WindowedCounts {
            window_index: k,
            t_start_ms: t0 + k as i64 * delta_ms,
            counts: BTreeMap::new(),
            n_sent: if k + 1 == n_windows { last_n_sent } else { n_full },
            overflow: 0,
        })
        .collect();

    for e in &trace.events {
        let k = ((e.t_ms - t0) / delta_ms) as usize;
        if k >= n_windows {
            continue; // inside a dropped final sliver
        }
        *windows[k].counts.entry(e.beacon_id).or_insert(0) += 1;
    }
    for w in &mut windows {
        for c in w.counts.values_mut() {
            if *c > w.n_sent {
                w.overflow += *c - w.n_sent;
                *c = w.n_sent;
            }
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(f: f64, delta: f64) -> RadioConfig {
        RadioConfig::new(f, 0.0, delta).unwrap()
    }

    fn ev(beacon_id: u32, t_ms: i64) -> PacketEvent {
        PacketEvent { beacon_id, t_ms }
    }

    #[test]
    fn boundary_arithmetic() {
        let trace = PacketTrace::new(vec![ev(1, 0), ev(2, 9999)]).unwrap();
        let w = window_counts(&trace, &cfg(1.0, 10.0)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].count(1), 1);
        assert_eq!(w[0].count(2), 1);

        let trace = PacketTrace::new(vec![ev(1, 0), ev(2, 10000)]).unwrap();
        let w = window_counts(&trace, &cfg(1.0, 10.0)).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].count(1), 1);
        assert_eq!(w[1].count(2), 1);
    }

    #[test]
    fn overflow_clamped_and_flagged() {
        let events: Vec<_> = (0..15).map(|i| ev(7, i * 100)).collect();
        let trace = PacketTrace::new(events).unwrap();
        let w = window_counts(&trace, &cfg(1.0, 10.0)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].count(7), 10);
        assert_eq!(w[0].overflow, 5);
    }

    #[test]
    fn empty_trace_empty_list() {
        let trace = PacketTrace::default();
        assert!(window_counts(&trace, &cfg(1.0, 10.0)).unwrap().is_empty());
    }

    #[test]
    fn duration_partial_rules() {
        // 24 s duration: third window is 4 s < delta/2, dropped
        let trace = PacketTrace::new(vec![ev(1, 0), ev(1, 15000), ev(1, 21000)]).unwrap();
        let w = window_counts_with_duration(&trace, &cfg(1.0, 10.0), 24000).unwrap();
        assert_eq!(w.len(), 2);
        // 27 s duration: third window is 7 s >= delta/2, kept with scaled budget
        let w = window_counts_with_duration(&trace, &cfg(1.0, 10.0), 27000).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].n_sent, 7);
        assert_eq!(w[2].count(1), 1);
    }

    #[test]
    fn non_monotone_trace_rejected() {
        assert!(PacketTrace::new(vec![ev(1, 100), ev(1, 50)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = PacketTrace::new(vec![ev(1, 0), ev(3, 55), ev(2, 123456)]).unwrap();
        trace.to_csv_file(&path).unwrap();
        assert_eq!(PacketTrace::from_csv_file(&path).unwrap(), trace);
    }

    proptest! {
        // windows partition the events: sum of counts plus clamped overflow
        // equals the event total
        #[test]
        fn partition_property(
            ts in proptest::collection::vec(0i64..120_000, 1..200),
            ids in proptest::collection::vec(1u32..5, 200),
        ) {
            let mut ts = ts;
            ts.sort();
            let events: Vec<_> = ts.iter().zip(ids.iter())
                .map(|(&t, &b)| ev(b, t)).collect();
            let n = events.len();
            let trace = PacketTrace::new(events).unwrap();
            let w = window_counts(&trace, &cfg(1.0, 10.0)).unwrap();
            let total: u32 = w.iter()
                .map(|w| w.counts.values().sum::<u32>() + w.overflow)
                .sum();
            prop_assert_eq!(total as usize, n);
            // indices consecutive from 0
            for (i, win) in w.iter().enumerate() {
                prop_assert_eq!(win.window_index, i);
            }
        }
    }
}
