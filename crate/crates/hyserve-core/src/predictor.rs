//! Linear batch-latency prediction.
//!
//! A serving iteration's latency is modeled as an affine function of the
//! batch composition: total prefill tokens, total decode tokens, their
//! squares, and the per-phase request counts. The model is fitted by
//! ordinary least squares on samples collected from a profiling grid, then
//! the prefill-related weights are clamped nonnegative so that marginal
//! cost is monotone in chunk length — the property the max-tokens solver
//! relies on.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{true_batch_latency, HardwareModel, PlanEntry, PlanEntryKind};

/// Feature vector of one candidate batch.
///
/// Squares are stored, not recomputed at prediction time, so an accumulator
/// can be patched incrementally while a batch is being built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchFeatures {
    pub s_p: f64,
    pub s_d: f64,
    pub s_p2: f64,
    pub s_d2: f64,
    pub n_p: f64,
    pub n_d: f64,
}

impl BatchFeatures {
    pub fn zero() -> Self {
        BatchFeatures {
            s_p: 0.0,
            s_d: 0.0,
            s_p2: 0.0,
            s_d2: 0.0,
            n_p: 0.0,
            n_d: 0.0,
        }
    }

    /// Build a consistent vector from raw counts (squares derived).
    pub fn from_counts(s_p: u64, s_d: u64, n_p: u32, n_d: u32) -> Self {
        let sp = s_p as f64;
        let sd = s_d as f64;
        BatchFeatures {
            s_p: sp,
            s_d: sd,
            s_p2: sp * sp,
            s_d2: sd * sd,
            n_p: n_p as f64,
            n_d: n_d as f64,
        }
    }

    /// Add one prefill request contributing `tokens` this iteration.
    pub fn add_prefill(&mut self, tokens: u64) {
        self.s_p += tokens as f64;
        self.s_p2 = self.s_p * self.s_p;
        self.n_p += 1.0;
    }

    /// Remove a previously added prefill contribution.
    pub fn remove_prefill(&mut self, tokens: u64) {
        self.s_p -= tokens as f64;
        self.s_p2 = self.s_p * self.s_p;
        self.n_p -= 1.0;
    }

    /// Add one decode request (one token per decode request per iteration).
    pub fn add_decode(&mut self) {
        self.s_d += 1.0;
        self.s_d2 = self.s_d * self.s_d;
        self.n_d += 1.0;
    }

    /// Remove a previously added decode contribution.
    pub fn remove_decode(&mut self) {
        self.s_d -= 1.0;
        self.s_d2 = self.s_d * self.s_d;
        self.n_d -= 1.0;
    }
}

/// Extract the feature vector of a batch plan.
///
/// Prefill contributions are the per-iteration chunk lengths, i.e. already
/// net of any prefix-cache credit. Decode entries contribute one token each;
/// re-admissions carry no compute and do not appear in the features.
pub fn featurize(entries: &[PlanEntry]) -> BatchFeatures {
    let mut f = BatchFeatures::zero();
    for e in entries {
        match e.kind {
            PlanEntryKind::Prefill => f.add_prefill(e.prefill_tokens as u64),
            PlanEntryKind::Decode => f.add_decode(),
            PlanEntryKind::Readmit => {}
        }
    }
    f
}

/// Names used in serialized models and error messages, in design-matrix order.
const FEATURE_NAMES: [&str; 6] = ["s_p", "s_d", "s_p2", "s_d2", "n_p", "n_d"];

/// Which optional features are active. `s_d2` is the only toggle: the
/// decode-square term is part of the full formulation but an ablation
/// variant drops it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub s_d2: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags { s_d2: true }
    }
}

impl FeatureFlags {
    fn enabled(&self, name: &str) -> bool {
        name != "s_d2" || self.s_d2
    }

    fn active_names(&self) -> Vec<&'static str> {
        FEATURE_NAMES
            .iter()
            .copied()
            .filter(|n| self.enabled(n))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub samples: usize,
    pub train_mape: f64,
}

/// Fitted latency model: intercept plus one weight per enabled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub intercept: f64,
    pub w_s_p: f64,
    pub w_s_d: f64,
    pub w_s_p2: f64,
    pub w_s_d2: f64,
    pub w_n_p: f64,
    pub w_n_d: f64,
    pub flags: FeatureFlags,
    pub fit_stats: FitStats,
}

impl PredictorModel {
    /// A model whose weights mirror a ground-truth cost model exactly
    /// (useful in tests and as the "perfect predictor" baseline).
    pub fn from_hardware(hw: &HardwareModel, flags: FeatureFlags) -> Self {
        let s = hw.parallel_scale;
        PredictorModel {
            intercept: hw.c0,
            w_s_p: hw.c1 / s,
            w_s_d: hw.c2 / s,
            w_s_p2: hw.c3 / s,
            w_s_d2: if flags.s_d2 { hw.c3b / s } else { 0.0 },
            w_n_p: hw.c4 / s,
            w_n_d: hw.c5 / s,
            flags,
            fit_stats: FitStats {
                samples: 0,
                train_mape: 0.0,
            },
        }
    }

    fn weight(&self, name: &str) -> f64 {
        match name {
            "s_p" => self.w_s_p,
            "s_d" => self.w_s_d,
            "s_p2" => self.w_s_p2,
            "s_d2" => self.w_s_d2,
            "n_p" => self.w_n_p,
            "n_d" => self.w_n_d,
            _ => unreachable!("unknown feature"),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut weights = BTreeMap::new();
        weights.insert("intercept".to_string(), self.intercept);
        for name in self.flags.active_names() {
            weights.insert(name.to_string(), self.weight(name));
        }
        serde_json::json!({
            "weights": weights,
            "enabled_features": self.flags.active_names(),
            "fit_stats": self.fit_stats,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, FitError> {
        let file: ModelFile = serde_json::from_value(v.clone())
            .map_err(|e| FitError::Malformed(e.to_string()))?;
        let flags = FeatureFlags {
            s_d2: file.enabled_features.iter().any(|f| f == "s_d2"),
        };
        let w = |n: &str| file.weights.get(n).copied().unwrap_or(0.0);
        Ok(PredictorModel {
            intercept: w("intercept"),
            w_s_p: w("s_p"),
            w_s_d: w("s_d"),
            w_s_p2: w("s_p2"),
            w_s_d2: w("s_d2"),
            w_n_p: w("n_p"),
            w_n_d: w("n_d"),
            flags,
            fit_stats: file.fit_stats,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    weights: BTreeMap<String, f64>,
    enabled_features: Vec<String>,
    fit_stats: FitStats,
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("rank-deficient design matrix; collinear features: {}", features.join(", "))]
    RankDeficient { features: Vec<String> },
    #[error("malformed model file: {0}")]
    Malformed(String),
}

/// Predicted batch latency in milliseconds, floored at zero.
pub fn predict(model: &PredictorModel, f: &BatchFeatures) -> f64 {
    let mut v = model.intercept
        + model.w_s_p * f.s_p
        + model.w_s_d * f.s_d
        + model.w_s_p2 * f.s_p2
        + model.w_n_p * f.n_p
        + model.w_n_d * f.n_d;
    if model.flags.s_d2 {
        v += model.w_s_d2 * f.s_d2;
    }
    v.max(0.0)
}

/// Marginal latency of adding one decode request to the batch accumulator.
pub fn predict_decode_marginal(model: &PredictorModel, acc: &BatchFeatures) -> f64 {
    let mut with = *acc;
    with.add_decode();
    (predict(model, &with) - predict(model, acc)).max(0.0)
}

fn prefill_marginal(model: &PredictorModel, acc: &BatchFeatures, tokens: u64) -> f64 {
    let mut with = *acc;
    with.add_prefill(tokens);
    (predict(model, &with) - predict(model, acc)).max(0.0)
}

/// Per-request view the max-tokens solver needs: how much prefill is left
/// and how the request's KV footprint maps onto blocks.
#[derive(Debug, Clone, Copy)]
pub struct PrefillView {
    pub remaining_tokens: u32,
    pub kv_tokens: u64,
    pub blocks_held: u32,
}

/// Largest prefill chunk for one request that fits the remaining latency
/// budget `t`, chunk budget `c` and memory budget `m` (in blocks).
///
/// Returns `(l, t_req)` with `t_req` the predicted marginal latency of the
/// chosen chunk, or `(0, 0.0)` when not even a single token fits. The search
/// is an integer binary search: clamped weights make the marginal
/// nondecreasing in `l`.
pub fn get_max_tokens(
    model: &PredictorModel,
    t: f64,
    c: u32,
    m: u32,
    req: &PrefillView,
    acc: &BatchFeatures,
    block_size: u32,
) -> (u32, f64) {
    // Memory cap: after the chunk the request holds ceil((kv + l)/bs) blocks,
    // of which blocks_held are already allocated.
    let capacity_tokens = (req.blocks_held as u64 + m as u64) * block_size as u64;
    let mem_cap = capacity_tokens.saturating_sub(req.kv_tokens);
    let upper = (req.remaining_tokens as u64)
        .min(c as u64)
        .min(mem_cap) as u32;
    if upper == 0 {
        return (0, 0.0);
    }
    if prefill_marginal(model, acc, 1) > t {
        return (0, 0.0);
    }
    let mut lo = 1u32;
    let mut hi = upper;
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if prefill_marginal(model, acc, mid as u64) <= t {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    (lo, prefill_marginal(model, acc, lo as u64))
}

/// Grid of batch compositions to measure during hardware profiling.
///
/// `decode_steps` multiplies decode tokens per decode request (profiling
/// multi-step decode compositions); this decouples the decode-token column
/// from the decode-request column so both coefficients are identifiable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileGrid {
    pub prefill_tokens: Vec<u32>,
    pub prefill_requests: Vec<u32>,
    pub decode_requests: Vec<u32>,
    pub decode_steps: Vec<u32>,
    pub repeats: u32,
}

impl Default for ProfileGrid {
    fn default() -> Self {
        ProfileGrid {
            prefill_tokens: vec![0, 64, 128, 256, 512, 1024, 2048, 4096],
            prefill_requests: vec![1, 2, 4],
            decode_requests: vec![0, 1, 2, 4, 8, 16, 32, 64],
            decode_steps: vec![1, 2],
            repeats: 2,
        }
    }
}

impl ProfileGrid {
    /// Enumerate consistent grid cells as feature vectors.
    pub fn cells(&self) -> Vec<BatchFeatures> {
        let mut out = Vec::new();
        for &s_p in &self.prefill_tokens {
            let n_p_choices: Vec<u32> = if s_p == 0 {
                vec![0]
            } else {
                self.prefill_requests
                    .iter()
                    .copied()
                    .filter(|&n| n >= 1 && n <= s_p)
                    .collect()
            };
            for &n_p in &n_p_choices {
                for &n_d in &self.decode_requests {
                    let step_choices: Vec<u32> = if n_d == 0 {
                        vec![1]
                    } else {
                        self.decode_steps.clone()
                    };
                    for &k in &step_choices {
                        let s_d = n_d as u64 * k as u64;
                        out.push(BatchFeatures::from_counts(s_p as u64, s_d, n_p, n_d));
                    }
                }
            }
        }
        out
    }
}

/// Profiling output: observed `(features, latency)` pairs plus a warning
/// flag raised when some enabled feature never varies across the grid.
#[derive(Debug, Clone)]
pub struct ProfileOutput {
    pub samples: Vec<(BatchFeatures, f64)>,
    pub degenerate: bool,
}

/// Measure the ground-truth latency of every grid cell.
pub fn profile_hardware(hw: &HardwareModel, grid: &ProfileGrid, seed: u64) -> ProfileOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for _ in 0..grid.repeats.max(1) {
        for f in grid.cells() {
            let y = true_batch_latency(hw, &f, &mut rng);
            samples.push((f, y));
        }
    }
    let degenerate = FEATURE_NAMES.iter().any(|name| {
        let mut values = samples.iter().map(|(f, _)| feature_value(f, name));
        match values.next() {
            Some(first) => values.all(|v| v == first),
            None => true,
        }
    });
    ProfileOutput {
        samples,
        degenerate,
    }
}

fn feature_value(f: &BatchFeatures, name: &str) -> f64 {
    match name {
        "s_p" => f.s_p,
        "s_d" => f.s_d,
        "s_p2" => f.s_p2,
        "s_d2" => f.s_d2,
        "n_p" => f.n_p,
        "n_d" => f.n_d,
        _ => unreachable!(),
    }
}

/// Fit the model by least squares, then clamp negative weights at zero
/// and re-fit the remaining ones with the clamped ones fixed (iterated
/// until stable). Batch latency is nondecreasing in every feature, so all
/// weights are clamped: the `s_p`/`s_p2`/`s_d` clamps guarantee the
/// monotone marginals the solver needs, and the rest keep a misspecified
/// fit from pricing admissions below zero (under heavy misspecification,
/// plain OLS pushes the intercept or the request-count weights negative,
/// which the zero floor would turn into free-looking batches).
pub fn fit(samples: &[(BatchFeatures, f64)], flags: FeatureFlags) -> Result<PredictorModel, FitError> {
    let names = flags.active_names();
    let ncols = names.len() + 1; // + intercept
    if samples.len() < ncols {
        return Err(FitError::TooFewSamples {
            needed: ncols,
            got: samples.len(),
        });
    }

    // Column scaling keeps the normal equations well conditioned (s_p2 spans
    // ~7 orders of magnitude more than n_p).
    let mut scales = vec![1.0f64; ncols];
    for (j, name) in names.iter().enumerate() {
        let mx = samples
            .iter()
            .map(|(f, _)| feature_value(f, name).abs())
            .fold(0.0f64, f64::max);
        if mx > 0.0 {
            scales[j + 1] = mx;
        }
    }

    let solve = |fixed_zero: &[bool]| -> Result<Vec<f64>, FitError> {
        let active: Vec<usize> = (0..ncols).filter(|&j| !fixed_zero[j]).collect();
        let k = active.len();
        let mut xtx = DMatrix::<f64>::zeros(k, k);
        let mut xty = DVector::<f64>::zeros(k);
        let mut row = vec![0.0f64; ncols];
        for (f, y) in samples {
            row[0] = 1.0;
            for (j, name) in names.iter().enumerate() {
                row[j + 1] = feature_value(f, name) / scales[j + 1];
            }
            for (a, &ja) in active.iter().enumerate() {
                xty[a] += row[ja] * y;
                for (b, &jb) in active.iter().enumerate() {
                    xtx[(a, b)] += row[ja] * row[jb];
                }
            }
        }
        let svd = xtx.clone().svd(true, true);
        let max_sv = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
        let tol = max_sv * 1e-10;
        let rank = svd.singular_values.iter().filter(|&&v| v > tol).count();
        if rank < k {
            // Name the features involved in the null space.
            let v_t = svd.v_t.as_ref().expect("svd computed");
            let mut involved = Vec::new();
            for (i, &sv) in svd.singular_values.iter().enumerate() {
                if sv <= tol {
                    for (a, &ja) in active.iter().enumerate() {
                        if v_t[(i, a)].abs() > 0.3 {
                            let label = if ja == 0 {
                                "intercept".to_string()
                            } else {
                                names[ja - 1].to_string()
                            };
                            if !involved.contains(&label) {
                                involved.push(label);
                            }
                        }
                    }
                }
            }
            return Err(FitError::RankDeficient { features: involved });
        }
        let w = svd
            .solve(&xty, tol)
            .map_err(|e| FitError::Malformed(e.to_string()))?;
        let mut full = vec![0.0f64; ncols];
        for (a, &ja) in active.iter().enumerate() {
            full[ja] = w[a] / scales[ja];
        }
        Ok(full)
    };

    let clamped = vec![true; ncols];
    let mut fixed_zero = vec![false; ncols];
    let mut weights = solve(&fixed_zero)?;
    loop {
        let mut changed = false;
        for j in 0..ncols {
            if clamped[j] && !fixed_zero[j] && weights[j] < 0.0 {
                fixed_zero[j] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        weights = solve(&fixed_zero)?;
        for j in 0..ncols {
            if fixed_zero[j] {
                weights[j] = 0.0;
            }
        }
    }

    let lookup = |name: &str| -> f64 {
        names
            .iter()
            .position(|n| *n == name)
            .map(|j| weights[j + 1])
            .unwrap_or(0.0)
    };
    let mut model = PredictorModel {
        intercept: weights[0],
        w_s_p: lookup("s_p"),
        w_s_d: lookup("s_d"),
        w_s_p2: lookup("s_p2"),
        w_s_d2: lookup("s_d2"),
        w_n_p: lookup("n_p"),
        w_n_d: lookup("n_d"),
        flags,
        fit_stats: FitStats {
            samples: samples.len(),
            train_mape: 0.0,
        },
    };
    model.fit_stats.train_mape = mape(&model, samples);
    Ok(model)
}

/// Mean absolute percentage error of the model on `samples`.
pub fn mape(model: &PredictorModel, samples: &[(BatchFeatures, f64)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (f, y) in samples {
        if y.abs() > 1e-12 {
            sum += (predict(model, f) - y).abs() / y.abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Write profiling samples as CSV (`S_p,S_d,S_p2,S_d2,N_p,N_d,latency_ms`).
pub fn samples_to_csv<W: std::io::Write>(
    samples: &[(BatchFeatures, f64)],
    w: W,
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["S_p", "S_d", "S_p2", "S_d2", "N_p", "N_d", "latency_ms"])?;
    for (f, y) in samples {
        wtr.write_record([
            f.s_p.to_string(),
            f.s_d.to_string(),
            f.s_p2.to_string(),
            f.s_d2.to_string(),
            f.n_p.to_string(),
            f.n_d.to_string(),
            y.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
