//! Trace Event Format export of simulated schedules.
//!
//! Every event becomes a complete (`"ph": "X"`) record in microseconds. Each
//! pipeline stage is a process; compute runs on thread 1 and outgoing
//! transfers on thread 2.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::{EventKind, ScheduleTrace};

pub const COMPUTE_TID: usize = 1;
pub const TRANSFER_TID: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub name: String,
    pub ph: String,
    pub ts: f64,
    pub dur: f64,
    pub pid: usize,
    pub tid: usize,
}

pub fn trace_records(trace: &ScheduleTrace) -> Vec<TraceRecord> {
    trace
        .events
        .iter()
        .map(|e| TraceRecord {
            name: match e.microbatch {
                Some(m) => format!("{}:{m}", e.kind.name()),
                None => e.kind.name().to_string(),
            },
            ph: "X".into(),
            ts: e.start * 1e6,
            dur: (e.end - e.start).max(0.0) * 1e6,
            pid: e.stage,
            tid: if e.kind.is_transfer() {
                TRANSFER_TID
            } else {
                COMPUTE_TID
            },
        })
        .collect()
}

pub fn export_trace(trace: &ScheduleTrace, path: &Path) -> io::Result<()> {
    let json = serde_json::to_string_pretty(&trace_records(trace))?;
    fs::write(path, json + "\n")
}

pub fn read_trace(path: &Path) -> io::Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Event kind and microbatch encoded in a record name.
pub fn parse_record_name(name: &str) -> Option<(EventKind, Option<usize>)> {
    match name.split_once(':') {
        Some((k, m)) => Some((EventKind::from_name(k)?, Some(m.parse().ok()?))),
        None => Some((EventKind::from_name(name)?, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TraceEvent;

    fn sample() -> ScheduleTrace {
        let ev = |stage, mb, kind, start: f64, end: f64| TraceEvent {
            stage,
            microbatch: mb,
            kind,
            start,
            end,
        };
        ScheduleTrace {
            events: vec![
                ev(1, Some(0), EventKind::Forward, 0.0, 1e-3),
                ev(1, Some(0), EventKind::TransferFwd, 1e-3, 1e-3),
                ev(2, Some(0), EventKind::Forward, 1e-3, 2.5e-3),
                ev(2, None, EventKind::Update, 2.5e-3, 3e-3),
            ],
            iteration_time: 3e-3,
            peak_in_flight: vec![1, 1],
            busy_time: vec![1e-3, 2e-3],
        }
    }

    #[test]
    fn empty_trace_is_empty_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        export_trace(&ScheduleTrace::default(), &path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v, serde_json::json!([]));
    }

    #[test]
    fn record_fields() {
        let r = trace_records(&sample());
        let v = serde_json::to_value(&r[0]).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["dur", "name", "ph", "pid", "tid", "ts"]);
        assert_eq!(r[0].name, "forward:0");
        assert_eq!(r[1].tid, TRANSFER_TID);
        assert_eq!(r[1].dur, 0.0);
        assert_eq!(r[3].name, "update");
        assert_eq!(parse_record_name("transfer_bwd:12"), Some((EventKind::TransferBwd, Some(12))));
        assert_eq!(parse_record_name("update"), Some((EventKind::Update, None)));
        assert_eq!(parse_record_name("idle"), None);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = sample();
        export_trace(&t, &path).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace_records(&t));
    }
}
