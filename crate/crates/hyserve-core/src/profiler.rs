//! SLO-aware latency-budget profiling.
//!
//! The profiler measures the pure-online baseline, turns interference
//! tolerance ratios into absolute thresholds (`baseline * (1 + tolerance)`),
//! and binary-searches the largest per-iteration latency budget whose
//! hybrid run still meets every threshold. Compliance is assumed monotone
//! in the budget (more budget, more offline work, more interference); the
//! probe trace is recorded so non-monotone observations can be surfaced
//! rather than hidden.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compute, RunMetrics};
use crate::predictor::PredictorModel;
use crate::sim::{RunError, SimEnv, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloMetric {
    MeanTtft,
    P99Ttft,
    MeanTbt,
    P99Tbt,
}

impl SloMetric {
    pub const ALL: [SloMetric; 4] = [
        SloMetric::MeanTtft,
        SloMetric::P99Ttft,
        SloMetric::MeanTbt,
        SloMetric::P99Tbt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SloMetric::MeanTtft => "mean_ttft",
            SloMetric::P99Ttft => "p99_ttft",
            SloMetric::MeanTbt => "mean_tbt",
            SloMetric::P99Tbt => "p99_tbt",
        }
    }
}

/// One latency objective: a metric and the tolerated fractional
/// degradation over the pure-online baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SloSpec {
    pub metric: SloMetric,
    pub tolerance: f64,
}

/// An objective with its baseline measured and threshold resolved.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResolvedSlo {
    pub metric: SloMetric,
    pub tolerance: f64,
    pub baseline_ms: f64,
    pub threshold_ms: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BudgetSearchConfig {
    pub lo_ms: f64,
    pub hi_ms: f64,
    /// Termination width of the bisection.
    pub eps_ms: f64,
    /// Replications per probe (distinct seeds).
    pub trials: usize,
    /// Fraction of the threshold treated as the pass bound (1.0 = exact;
    /// 0.95 leaves margin for boundary noise).
    pub safety: f64,
}

impl Default for BudgetSearchConfig {
    fn default() -> Self {
        BudgetSearchConfig {
            lo_ms: 1.0,
            hi_ms: 200.0,
            eps_ms: 2.0,
            trials: 3,
            safety: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("baseline requires a nonempty online workload")]
    EmptyOnline,
    #[error("offline requests are not allowed in a baseline workload")]
    OfflineInBaseline,
    #[error(
        "infeasible range: budget {lo_ms} ms already violates the SLOs (probes: {probes:?})"
    )]
    InfeasibleRange { lo_ms: f64, probes: Vec<Probe> },
    #[error("simulation failed: {0}")]
    Run(#[from] RunError),
    #[error("metrics: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// One probe of the compliance oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub budget_ms: f64,
    pub pass: bool,
    /// Worst achieved value per SLO across trials, aligned with the
    /// objective list (empty for stubbed oracles).
    pub achieved_ms: Vec<f64>,
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// The feasibility check at the range's low end.
    Precondition,
    /// The unbounded-case check at the range's high end.
    Upper,
    Bisect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetReport {
    pub budget_ms: f64,
    pub baseline: Vec<ResolvedSlo>,
    pub probes: Vec<Probe>,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Window width used for run metrics during profiling (seconds).
const PROFILE_WINDOW_S: f64 = 10.0;

/// Run the workload with the offline queue empty and an unbounded budget:
/// the pure-online baseline the thresholds are anchored to.
pub fn baseline_run(env: &SimEnv, model: &PredictorModel, seed: u64) -> Result<RunMetrics, ProfileError> {
    if env.online.is_empty() {
        return Err(ProfileError::EmptyOnline);
    }
    let mut base_env = env.clone();
    base_env.offline = Default::default();
    base_env.termination = Termination::AllDone;
    let report = base_env.run_with_seeds(f64::INFINITY, model, seed, env.psm_seed)?;
    Ok(compute(
        &report.log.events,
        report.final_clock_ms,
        PROFILE_WINDOW_S,
    )?)
}

/// Resolve tolerance ratios into absolute thresholds against baseline
/// metrics averaged over the profiling seeds.
pub fn resolve_thresholds(
    env: &SimEnv,
    model: &PredictorModel,
    specs: &[SloSpec],
    seeds: &[u64],
) -> Result<Vec<ResolvedSlo>, ProfileError> {
    let mut baselines = Vec::new();
    for &seed in seeds {
        baselines.push(baseline_run(env, model, seed)?);
    }
    Ok(specs
        .iter()
        .map(|s| {
            let baseline_ms = baselines.iter().map(|b| b.get(s.metric)).sum::<f64>()
                / baselines.len() as f64;
            ResolvedSlo {
                metric: s.metric,
                tolerance: s.tolerance,
                baseline_ms,
                threshold_ms: baseline_ms * (1.0 + s.tolerance),
            }
        })
        .collect())
}

/// Outcome of one compliance check: pass/fail plus the worst achieved
/// value per SLO across the trial seeds.
#[derive(Debug, Clone)]
pub struct ComplianceResult {
    pub pass: bool,
    pub achieved_ms: Vec<f64>,
}

/// Run the hybrid workload at the given budget once per seed; compliant
/// iff every SLO holds (within the safety fraction) in every trial.
pub fn check_compliance(
    env: &SimEnv,
    model: &PredictorModel,
    budget_ms: f64,
    slos: &[ResolvedSlo],
    seeds: &[u64],
    safety: f64,
) -> Result<ComplianceResult, ProfileError> {
    let mut worst = vec![f64::NEG_INFINITY; slos.len()];
    let mut pass = true;
    for &seed in seeds {
        let report = env.run_with_seeds(budget_ms, model, seed, env.psm_seed ^ seed)?;
        let metrics = compute(&report.log.events, report.final_clock_ms, PROFILE_WINDOW_S)?;
        for (i, slo) in slos.iter().enumerate() {
            let achieved = metrics.get(slo.metric);
            worst[i] = worst[i].max(achieved);
            if achieved > slo.threshold_ms * safety {
                pass = false;
            }
        }
    }
    Ok(ComplianceResult {
        pass,
        achieved_ms: worst,
    })
}

/// Generic monotone bisection over the budget, independent of how
/// compliance is evaluated. Returns the largest probed compliant budget
/// once the bracket is narrower than `eps_ms`.
///
/// Probe accounting: the low-end check is a precondition; the criterion
/// "probe count <= ceil(log2(range/eps)) + 1" covers the upper check plus
/// the bisection probes.
pub fn search_budget_with<F>(
    cfg: &BudgetSearchConfig,
    mut oracle: F,
) -> Result<(f64, Vec<Probe>), ProfileError>
where
    F: FnMut(f64) -> Result<ComplianceResult, ProfileError>,
{
    assert!(cfg.lo_ms < cfg.hi_ms, "search range must be nonempty");
    assert!(cfg.eps_ms > 0.0, "eps must be positive");
    let mut probes = Vec::new();
    let lo_result = oracle(cfg.lo_ms)?;
    probes.push(Probe {
        budget_ms: cfg.lo_ms,
        pass: lo_result.pass,
        achieved_ms: lo_result.achieved_ms,
        kind: ProbeKind::Precondition,
    });
    if !lo_result.pass {
        return Err(ProfileError::InfeasibleRange {
            lo_ms: cfg.lo_ms,
            probes,
        });
    }
    let hi_result = oracle(cfg.hi_ms)?;
    probes.push(Probe {
        budget_ms: cfg.hi_ms,
        pass: hi_result.pass,
        achieved_ms: hi_result.achieved_ms,
        kind: ProbeKind::Upper,
    });
    if hi_result.pass {
        return Ok((cfg.hi_ms, probes));
    }
    let mut lo = cfg.lo_ms;
    let mut hi = cfg.hi_ms;
    while hi - lo > cfg.eps_ms {
        let mid = 0.5 * (lo + hi);
        let r = oracle(mid)?;
        probes.push(Probe {
            budget_ms: mid,
            pass: r.pass,
            achieved_ms: r.achieved_ms,
            kind: ProbeKind::Bisect,
        });
        if r.pass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, probes))
}

/// Detect pass-above-fail inversions in a probe trace.
fn non_monotone(probes: &[Probe]) -> bool {
    probes.iter().any(|a| {
        !a.pass
            && probes
                .iter()
                .any(|b| b.pass && b.budget_ms > a.budget_ms)
    })
}

/// Full budget search: resolve thresholds from the baseline, then bisect
/// compliance over `[lo, hi]`.
pub fn search_budget(
    env: &SimEnv,
    model: &PredictorModel,
    specs: &[SloSpec],
    cfg: &BudgetSearchConfig,
    seeds: &[u64],
) -> Result<BudgetReport, ProfileError> {
    let slos = resolve_thresholds(env, model, specs, seeds)?;
    let trial_seeds = &seeds[..cfg.trials.min(seeds.len()).max(1)];
    let (l_star, probes) = search_budget_with(cfg, |budget| {
        check_compliance(env, model, budget, &slos, trial_seeds, cfg.safety)
    })?;
    let mut warnings = Vec::new();
    let mut budget_ms = l_star;
    if non_monotone(&probes) {
        warnings.push("non-monotone compliance observed; returning the lowest compliant probe".into());
        budget_ms = probes
            .iter()
            .filter(|p| p.pass)
            .map(|p| p.budget_ms)
            .fold(f64::INFINITY, f64::min);
    }
    Ok(BudgetReport {
        budget_ms,
        baseline: slos,
        probes,
        seeds: seeds.to_vec(),
        warnings,
    })
}
