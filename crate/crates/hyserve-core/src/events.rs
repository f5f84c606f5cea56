//! Event-log records emitted by simulation runs.
//!
//! The log is JSONL: per-request lifecycle events interleaved with one
//! record per engine step. Metrics are pure functions of this log, so a
//! persisted log replays to exactly the in-run metric values.

use serde::{Deserialize, Serialize};

use crate::workload::{RequestClass, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrive,
    FirstToken,
    Token,
    Complete,
    Preempt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_ms: f64,
    #[serde(rename = "event")]
    pub kind: EventKind,
    pub request: RequestId,
    pub class: RequestClass,
}

/// One record per executed engine step: realized batch composition, the
/// ground-truth latency, and what the scheduler's model predicted for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_ms: f64,
    pub step: u64,
    #[serde(rename = "S_p")]
    pub s_p: f64,
    #[serde(rename = "S_d")]
    pub s_d: f64,
    #[serde(rename = "N_p")]
    pub n_p: f64,
    #[serde(rename = "N_d")]
    pub n_d: f64,
    pub latency_ms: f64,
    pub predicted_ms: f64,
}

/// A full run's log: lifecycle events plus step records, in time order.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub steps: Vec<StepRecord>,
}

impl EventLog {
    pub fn push(&mut self, ev: Event) {
        self.events.push(ev);
    }

    /// Serialize as JSONL: events and step records merged by timestamp
    /// (events first at equal times).
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut ei = 0;
        let mut si = 0;
        while ei < self.events.len() || si < self.steps.len() {
            let take_event = match (self.events.get(ei), self.steps.get(si)) {
                (Some(e), Some(s)) => e.t_ms <= s.t_ms,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if take_event {
                serde_json::to_writer(&mut w, &self.events[ei])?;
                ei += 1;
            } else {
                serde_json::to_writer(&mut w, &self.steps[si])?;
                si += 1;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parse a JSONL log previously produced by [`EventLog::write_jsonl`].
    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> std::io::Result<EventLog> {
        let mut log = EventLog::default();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            if v.get("event").is_some() {
                let ev: Event = serde_json::from_value(v)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                log.events.push(ev);
            } else {
                let st: StepRecord = serde_json::from_value(v)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                log.steps.push(st);
            }
        }
        Ok(log)
    }
}
