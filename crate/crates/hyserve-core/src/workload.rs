//! Request traces: ingestion, synthesis, and rate resampling.
//!
//! Prompts are abstracted as paths of `(segment id, token count)` pairs.
//! Segment IDs are opaque; two requests share a prompt prefix exactly when
//! their paths share a leading subsequence. This keeps prefix sharing
//! explicit and deterministic without any tokenizer.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RequestId = u64;
pub type SegmentId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestClass {
    Online,
    Offline,
}

impl RequestClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestClass::Online => "online",
            RequestClass::Offline => "offline",
        }
    }

    /// Default queue priority; lower is more important.
    pub fn default_priority(self) -> i32 {
        match self {
            RequestClass::Online => 0,
            RequestClass::Offline => 100,
        }
    }
}

/// One inference request.
///
/// `output_tokens` is ground truth known to the simulator only; the
/// scheduler never reads it — completion is revealed when decode finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub class: RequestClass,
    pub arrival_ms: u64,
    /// Ordered prompt segments as `(segment id, token count)`.
    pub prompt_path: Vec<(SegmentId, u32)>,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub priority: i32,
}

impl Request {
    pub fn is_online(&self) -> bool {
        self.class == RequestClass::Online
    }
}

/// Requests sorted by `(arrival_ms, id)`, plus the stream horizon.
#[derive(Debug, Clone, Default)]
pub struct RequestStream {
    pub requests: Vec<Request>,
    pub duration_ms: u64,
}

impl RequestStream {
    pub fn new(mut requests: Vec<Request>, duration_ms: u64) -> Self {
        requests.sort_by_key(|r| (r.arrival_ms, r.id));
        RequestStream {
            requests,
            duration_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid record: {msg}")]
    Validation { line: usize, msg: String },
    #[error("window holds {available} requests, need {needed}")]
    Capacity { available: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk trace record: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    arrival_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<RequestClass>,
    prompt_tokens: i64,
    output_tokens: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_path: Option<Vec<(SegmentId, u32)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    priority: Option<i32>,
}

/// Load a JSONL trace. Records without an explicit `class` take
/// `default_class`; records without a `prompt_path` get a single fresh
/// segment so they share nothing.
pub fn load_trace(path: &Path, default_class: RequestClass) -> Result<RequestStream, WorkloadError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut requests = Vec::new();
    // Fresh segments for path-less records; keep clear of small hand-picked IDs.
    let mut next_fresh_segment: SegmentId = 1 << 48;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.prompt_tokens < 1 {
            return Err(WorkloadError::Validation {
                line: lineno,
                msg: format!("prompt_tokens must be >= 1, got {}", rec.prompt_tokens),
            });
        }
        if rec.output_tokens < 1 {
            return Err(WorkloadError::Validation {
                line: lineno,
                msg: format!("output_tokens must be >= 1, got {}", rec.output_tokens),
            });
        }
        let prompt_tokens = rec.prompt_tokens as u32;
        let path = match rec.prompt_path {
            Some(p) => {
                let sum: u64 = p.iter().map(|&(_, t)| t as u64).sum();
                if sum != prompt_tokens as u64 {
                    return Err(WorkloadError::Validation {
                        line: lineno,
                        msg: format!(
                            "prompt_path tokens sum to {sum}, prompt_tokens is {prompt_tokens}"
                        ),
                    });
                }
                p
            }
            None => {
                let seg = next_fresh_segment;
                next_fresh_segment += 1;
                vec![(seg, prompt_tokens)]
            }
        };
        let class = rec.class.unwrap_or(default_class);
        requests.push(Request {
            id: requests.len() as RequestId,
            class,
            arrival_ms: rec.arrival_ms,
            prompt_path: path,
            prompt_tokens,
            output_tokens: rec.output_tokens as u32,
            priority: rec.priority.unwrap_or_else(|| class.default_priority()),
        });
    }
    let duration = requests.iter().map(|r| r.arrival_ms).max().unwrap_or(0);
    Ok(RequestStream::new(requests, duration))
}

/// Write a stream in the same JSONL format `load_trace` reads.
pub fn write_trace<W: Write>(stream: &RequestStream, mut w: W) -> Result<(), WorkloadError> {
    for r in &stream.requests {
        let rec = TraceRecord {
            arrival_ms: r.arrival_ms,
            class: Some(r.class),
            prompt_tokens: r.prompt_tokens as i64,
            output_tokens: r.output_tokens as i64,
            prompt_path: Some(r.prompt_path.clone()),
            priority: Some(r.priority),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| WorkloadError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w)?;
    }
    Ok(())
}

/// Uniformly sample `round(duration_s * target_qps)` requests without
/// replacement from the stream's `[0, duration_s)` window, keeping original
/// timestamps.
pub fn sample_to_qps(
    stream: &RequestStream,
    target_qps: f64,
    duration_s: f64,
    seed: u64,
) -> Result<RequestStream, WorkloadError> {
    if target_qps <= 0.0 || duration_s <= 0.0 {
        return Err(WorkloadError::InvalidParam(
            "target_qps and duration_s must be positive".into(),
        ));
    }
    let needed = (duration_s * target_qps).round() as usize;
    let window_ms = (duration_s * 1000.0) as u64;
    let window: Vec<&Request> = stream
        .requests
        .iter()
        .filter(|r| r.arrival_ms < window_ms)
        .collect();
    if window.len() < needed {
        return Err(WorkloadError::Capacity {
            available: window.len(),
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index_sample(&mut rng, window.len(), needed);
    let requests: Vec<Request> = picked.iter().map(|i| window[i].clone()).collect();
    Ok(RequestStream::new(requests, window_ms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BurstShape {
    Sine,
    Square,
}

/// Rate envelope for synthetic arrivals. The envelope has unit mean, so the
/// configured rate is also the long-run mean rate; `factor` is the
/// peak-to-trough rate ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BurstSpec {
    pub factor: f64,
    pub period_s: f64,
    pub shape: BurstShape,
}

impl BurstSpec {
    pub fn flat() -> Self {
        BurstSpec {
            factor: 1.0,
            period_s: 60.0,
            shape: BurstShape::Sine,
        }
    }

    fn envelope(&self, t_s: f64) -> f64 {
        if self.factor <= 1.0 {
            return 1.0;
        }
        match self.shape {
            BurstShape::Sine => {
                // (1 + a sin) with (1+a)/(1-a) = factor
                let a = (self.factor - 1.0) / (self.factor + 1.0);
                1.0 + a * (2.0 * std::f64::consts::PI * t_s / self.period_s).sin()
            }
            BurstShape::Square => {
                let hi = 2.0 * self.factor / (self.factor + 1.0);
                let lo = 2.0 / (self.factor + 1.0);
                let phase = (t_s / self.period_s).fract();
                if phase < 0.5 {
                    hi
                } else {
                    lo
                }
            }
        }
    }

    fn peak(&self) -> f64 {
        if self.factor <= 1.0 {
            1.0
        } else {
            match self.shape {
                BurstShape::Sine => 1.0 + (self.factor - 1.0) / (self.factor + 1.0),
                BurstShape::Square => 2.0 * self.factor / (self.factor + 1.0),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthDist {
    Fixed { value: u32 },
    Uniform { min: u32, max: u32 },
    Normal { mean: f64, std_dev: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl LengthDist {
    fn validate(&self) -> Result<(), WorkloadError> {
        match *self {
            LengthDist::Fixed { value } => {
                if value < 1 {
                    return Err(WorkloadError::InvalidParam("fixed length must be >= 1".into()));
                }
            }
            LengthDist::Uniform { min, max } => {
                if min < 1 || max < min {
                    return Err(WorkloadError::InvalidParam(format!(
                        "uniform bounds invalid: [{min}, {max}]"
                    )));
                }
            }
            LengthDist::Normal { std_dev, .. } => {
                if std_dev.is_nan() || std_dev < 0.0 {
                    return Err(WorkloadError::InvalidParam("normal std_dev must be >= 0".into()));
                }
            }
            LengthDist::LogNormal { sigma, .. } => {
                if sigma.is_nan() || sigma < 0.0 {
                    return Err(WorkloadError::InvalidParam("lognormal sigma must be >= 0".into()));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
            LengthDist::Normal { mean, std_dev } => {
                let d = Normal::new(mean, std_dev).expect("validated");
                (d.sample(rng).round().max(1.0)) as u32
            }
            LengthDist::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).expect("validated");
                (d.sample(rng).round().max(1.0)) as u32
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LengthSpec {
    pub prompt: LengthDist,
    pub output: LengthDist,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Synthesize online arrivals: a Poisson process modulated by the burst
/// envelope (generated by thinning), with prompt/output lengths drawn from
/// the configured distributions. Each request gets a fresh segment, so
/// synthetic online streams share no prefixes.
pub fn synth_arrivals(
    rate_qps: f64,
    duration_s: f64,
    burst: &BurstSpec,
    lengths: &LengthSpec,
    seed: u64,
) -> Result<RequestStream, WorkloadError> {
    if rate_qps <= 0.0 || duration_s <= 0.0 {
        return Err(WorkloadError::InvalidParam(
            "rate and duration must be positive".into(),
        ));
    }
    if burst.factor < 1.0 {
        return Err(WorkloadError::InvalidParam("burst factor must be >= 1".into()));
    }
    if burst.factor > 1.0 && burst.period_s <= 0.0 {
        return Err(WorkloadError::InvalidParam("burst period must be positive".into()));
    }
    lengths.prompt.validate()?;
    lengths.output.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda_max = rate_qps * burst.peak();
    let mut t = 0.0f64;
    let mut requests = Vec::new();
    loop {
        // homogeneous process at lambda_max, thinned to the envelope
        let u: f64 = rng.random();
        t += -u.ln() / lambda_max;
        if t >= duration_s {
            break;
        }
        let keep: f64 = rng.random();
        if keep * lambda_max > rate_qps * burst.envelope(t) {
            continue;
        }
        let id = requests.len() as RequestId;
        let prompt_tokens = lengths.prompt.sample(&mut rng);
        let output_tokens = lengths.output.sample(&mut rng);
        let segment = splitmix64(seed ^ (id.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        requests.push(Request {
            id,
            class: RequestClass::Online,
            arrival_ms: (t * 1000.0).round() as u64,
            prompt_path: vec![(segment, prompt_tokens)],
            prompt_tokens,
            output_tokens,
            priority: RequestClass::Online.default_priority(),
        });
    }
    Ok(RequestStream::new(requests, (duration_s * 1000.0) as u64))
}

/// Offline workload with controlled sharing: `n_groups * per_group`
/// requests, each group sharing one prefix segment and adding a unique
/// suffix. Arrival order interleaves the groups round-robin — the worst
/// case for arrival-order scheduling.
pub fn synth_prefix_workload(
    n_groups: u32,
    per_group: u32,
    shared_tokens: u32,
    unique_tokens: u32,
    seed: u64,
) -> Result<RequestStream, WorkloadError> {
    if n_groups < 1 || per_group < 1 || shared_tokens < 1 || unique_tokens < 1 {
        return Err(WorkloadError::InvalidParam("all counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::new();
    for round in 0..per_group {
        for g in 0..n_groups {
            let id = requests.len() as RequestId;
            let shared_seg = splitmix64(seed ^ (g as u64 + 1));
            let unique_seg =
                splitmix64(seed ^ ((g as u64 + 1) << 32) ^ (round as u64 + 1) ^ 0xabcd_ef12);
            let output_tokens = rng.random_range(4..=16u32);
            requests.push(Request {
                id,
                class: RequestClass::Offline,
                arrival_ms: 0,
                prompt_path: vec![(shared_seg, shared_tokens), (unique_seg, unique_tokens)],
                prompt_tokens: shared_tokens + unique_tokens,
                output_tokens,
                priority: RequestClass::Offline.default_priority(),
            });
        }
    }
    Ok(RequestStream::new(requests, 0))
}
