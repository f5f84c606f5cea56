//! Latency and throughput metrics over event logs.
//!
//! TTFT and TBT aggregates cover online requests only; offline requests
//! contribute to throughput. TBT percentiles pool all token gaps across
//! online requests (token-weighted, the common serving-benchmark
//! convention). Percentiles use the nearest-rank definition so results are
//! bit-reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventKind};
use crate::workload::{RequestClass, RequestId};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples to aggregate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Mean,
    P99,
}

/// Arithmetic mean or nearest-rank 99th percentile
/// (`sorted[ceil(0.99 * n) - 1]`).
pub fn aggregate(values: &[f64], stat: Stat) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    match stat {
        Stat::Mean => Ok(values.iter().sum::<f64>() / values.len() as f64),
        Stat::P99 => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let rank = (0.99 * sorted.len() as f64).ceil() as usize;
            Ok(sorted[rank.max(1) - 1])
        }
    }
}

/// Fractional latency degradation of a hybrid run against its baseline.
pub fn interference_ratio(hybrid_ms: f64, baseline_ms: f64) -> f64 {
    hybrid_ms / baseline_ms - 1.0
}

/// Lifecycle timeline of one request, extracted from the event log.
#[derive(Debug, Clone, Default)]
pub struct RequestTimeline {
    pub class: Option<RequestClass>,
    pub arrival_ms: Option<f64>,
    pub first_token_ms: Option<f64>,
    pub emissions: Vec<f64>,
    pub completed: bool,
}

/// Time to first token: first emission minus arrival. `None` when the
/// request never produced a token (counted as dropped upstream).
pub fn ttft_of(tl: &RequestTimeline) -> Option<f64> {
    Some(tl.first_token_ms? - tl.arrival_ms?)
}

/// Gaps between consecutive token emissions (the first token counts as
/// emission one, so a request with `n` emissions yields `n - 1` gaps).
pub fn tbt_series(tl: &RequestTimeline) -> Vec<f64> {
    tl.emissions.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn timelines(events: &[Event]) -> BTreeMap<RequestId, RequestTimeline> {
    let mut map: BTreeMap<RequestId, RequestTimeline> = BTreeMap::new();
    for ev in events {
        let tl = map.entry(ev.request).or_default();
        tl.class = Some(ev.class);
        match ev.kind {
            EventKind::Arrive => tl.arrival_ms = Some(ev.t_ms),
            EventKind::FirstToken => {
                tl.first_token_ms = Some(ev.t_ms);
                tl.emissions.push(ev.t_ms);
            }
            EventKind::Token => tl.emissions.push(ev.t_ms),
            EventKind::Complete => tl.completed = true,
            EventKind::Preempt => {}
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub window_start_s: f64,
    pub online_tokens: u64,
    pub offline_tokens: u64,
    pub online_completions: u64,
    pub online_tps: f64,
    pub offline_tps: f64,
    pub online_qps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalBreakdown {
    pub windows: Vec<WindowStat>,
    /// Pearson correlation between windowed online QPS and offline TPS.
    pub online_qps_offline_tps_corr: Option<f64>,
}

/// Per-window token throughput by class, plus the correlation between
/// online completion rate and offline token rate.
pub fn temporal_breakdown(events: &[Event], window_s: f64, horizon_ms: f64) -> TemporalBreakdown {
    assert!(window_s > 0.0, "window must be positive");
    let n_windows = ((horizon_ms / 1000.0 / window_s).ceil() as usize).max(1);
    let mut windows: Vec<WindowStat> = (0..n_windows)
        .map(|i| WindowStat {
            window_start_s: i as f64 * window_s,
            online_tokens: 0,
            offline_tokens: 0,
            online_completions: 0,
            online_tps: 0.0,
            offline_tps: 0.0,
            online_qps: 0.0,
        })
        .collect();
    for ev in events {
        let w = (((ev.t_ms / 1000.0) / window_s) as usize).min(n_windows - 1);
        match (ev.kind, ev.class) {
            (EventKind::FirstToken | EventKind::Token, RequestClass::Online) => {
                windows[w].online_tokens += 1;
            }
            (EventKind::FirstToken | EventKind::Token, RequestClass::Offline) => {
                windows[w].offline_tokens += 1;
            }
            (EventKind::Complete, RequestClass::Online) => {
                windows[w].online_completions += 1;
            }
            _ => {}
        }
    }
    for w in &mut windows {
        w.online_tps = w.online_tokens as f64 / window_s;
        w.offline_tps = w.offline_tokens as f64 / window_s;
        w.online_qps = w.online_completions as f64 / window_s;
    }
    let xs: Vec<f64> = windows.iter().map(|w| w.online_qps).collect();
    let ys: Vec<f64> = windows.iter().map(|w| w.offline_tps).collect();
    TemporalBreakdown {
        online_qps_offline_tps_corr: pearson(&xs, &ys),
        windows,
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Full metric set of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_ttft: f64,
    pub p99_ttft: f64,
    pub mean_tbt: f64,
    pub p99_tbt: f64,
    pub online_tps: f64,
    pub offline_tps: f64,
    pub total_tps: f64,
    pub online_qps: f64,
    pub offline_qps: f64,
    pub online_tokens: u64,
    pub offline_tokens: u64,
    pub completed_online: u64,
    pub completed_offline: u64,
    /// Online requests that never produced a first token (excluded from
    /// latency aggregates).
    pub dropped_online: u64,
    pub horizon_ms: f64,
    pub breakdown: TemporalBreakdown,
}

impl RunMetrics {
    pub fn get(&self, metric: crate::profiler::SloMetric) -> f64 {
        use crate::profiler::SloMetric::*;
        match metric {
            MeanTtft => self.mean_ttft,
            P99Ttft => self.p99_ttft,
            MeanTbt => self.mean_tbt,
            P99Tbt => self.p99_tbt,
        }
    }
}

/// Compute all run metrics from an event log. `horizon_ms` is the
/// throughput denominator (the run's final clock); `window_s` the bucket
/// width of the temporal breakdown.
pub fn compute(events: &[Event], horizon_ms: f64, window_s: f64) -> Result<RunMetrics, MetricsError> {
    let tls = timelines(events);
    let mut ttfts = Vec::new();
    let mut tbts = Vec::new();
    let mut online_tokens = 0u64;
    let mut offline_tokens = 0u64;
    let mut completed_online = 0u64;
    let mut completed_offline = 0u64;
    let mut dropped_online = 0u64;
    for tl in tls.values() {
        let online = tl.class == Some(RequestClass::Online);
        if online {
            online_tokens += tl.emissions.len() as u64;
            if tl.completed {
                completed_online += 1;
            }
            match ttft_of(tl) {
                Some(v) => ttfts.push(v),
                None => dropped_online += 1,
            }
            tbts.extend(tbt_series(tl));
        } else {
            offline_tokens += tl.emissions.len() as u64;
            if tl.completed {
                completed_offline += 1;
            }
        }
    }
    let horizon_s = (horizon_ms / 1000.0).max(1e-9);
    let breakdown = temporal_breakdown(events, window_s, horizon_ms);
    // runs without online requests have no latency samples; their latency
    // aggregates are NaN and only the throughput fields are meaningful
    let agg = |values: &[f64], stat: Stat| aggregate(values, stat).unwrap_or(f64::NAN);
    Ok(RunMetrics {
        mean_ttft: agg(&ttfts, Stat::Mean),
        p99_ttft: agg(&ttfts, Stat::P99),
        mean_tbt: agg(&tbts, Stat::Mean),
        p99_tbt: agg(&tbts, Stat::P99),
        online_tps: online_tokens as f64 / horizon_s,
        offline_tps: offline_tokens as f64 / horizon_s,
        total_tps: (online_tokens + offline_tokens) as f64 / horizon_s,
        online_qps: completed_online as f64 / horizon_s,
        offline_qps: completed_offline as f64 / horizon_s,
        online_tokens,
        offline_tokens,
        completed_online,
        completed_offline,
        dropped_online,
        horizon_ms,
        breakdown,
    })
}
