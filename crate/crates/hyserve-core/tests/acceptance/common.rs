//! Shared fixtures for the acceptance suite: the reference desk-scale
//! configuration and helpers that run simulations while enforcing the
//! budget-safety contract on every plan.

use hyserve_core::engine::{EngineConfig, HardwareModel};
use hyserve_core::metrics::{compute, RunMetrics};
use hyserve_core::predictor::{fit, profile_hardware, FeatureFlags, PredictorModel, ProfileGrid};
use hyserve_core::scheduler::{OfflinePolicy, SchedulerConfig};
use hyserve_core::sim::{RunReport, SimEnv, Termination};
use hyserve_core::workload::{
    synth_arrivals, synth_prefix_workload, BurstShape, BurstSpec, LengthDist, LengthSpec,
    RequestStream,
};

pub const WINDOW_S: f64 = 10.0;

/// Ground-truth cost model used by the end-to-end criteria.
pub fn reference_hw() -> HardwareModel {
    HardwareModel {
        c0: 2.0,
        c1: 0.05,
        c2: 0.3,
        c3: 2e-6,
        c3b: 1e-5,
        c4: 0.5,
        c5: 0.1,
        c_cross: 0.0,
        noise_pct: 0.01,
        parallel_scale: 1.0,
        seed: 0,
    }
}

pub fn reference_engine() -> EngineConfig {
    EngineConfig {
        kv_blocks: 4096,
        block_size: 16,
        prefix_cache_entries: 64,
        readmit_penalty_ms: 0.5,
    }
}

pub fn reference_scheduler() -> SchedulerConfig {
    SchedulerConfig {
        latency_budget_ms: 50.0,
        chunk_tokens: 512,
        offline_reserve_blocks: 64,
        offline_policy: OfflinePolicy::Psm,
        psm_utility: 0.9,
        lookahead: true,
        ..SchedulerConfig::default()
    }
}

/// Ten-minute bursty online trace (burst factor 3, two-minute period).
pub fn bursty_online(rate_qps: f64, seed: u64) -> RequestStream {
    let burst = BurstSpec {
        factor: 3.0,
        period_s: 120.0,
        shape: BurstShape::Sine,
    };
    let lengths = LengthSpec {
        prompt: LengthDist::LogNormal { mu: 5.0, sigma: 0.6 },
        output: LengthDist::Uniform { min: 16, max: 96 },
    };
    synth_arrivals(rate_qps, 600.0, &burst, &lengths, seed).unwrap()
}

/// Offline backlog with moderate prefix sharing, IDs offset past any
/// online stream.
pub fn offline_backlog(n_groups: u32, per_group: u32, shared: u32, unique: u32) -> RequestStream {
    let mut s = synth_prefix_workload(n_groups, per_group, shared, unique, 909).unwrap();
    for r in &mut s.requests {
        r.id += 1 << 32;
    }
    s
}

/// Offline backlog of plain (unshared) requests with configurable lengths.
pub fn offline_plain(count_hint_qps: f64, prompt: (u32, u32), output: (u32, u32)) -> RequestStream {
    let lengths = LengthSpec {
        prompt: LengthDist::Uniform { min: prompt.0, max: prompt.1 },
        output: LengthDist::Uniform { min: output.0, max: output.1 },
    };
    let mut s = synth_arrivals(count_hint_qps, 600.0, &BurstSpec::flat(), &lengths, 911).unwrap();
    for r in &mut s.requests {
        r.id += 1 << 32;
        r.class = hyserve_core::workload::RequestClass::Offline;
        r.priority = 100;
        r.arrival_ms = 0;
    }
    RequestStream::new(s.requests, 0)
}

pub fn reference_env(online: RequestStream, offline: RequestStream) -> SimEnv {
    let mut env = SimEnv::new(online, offline);
    env.engine_cfg = reference_engine();
    env.hw = reference_hw();
    env.sched_cfg = reference_scheduler();
    env.psm_seed = 7;
    env.termination = Termination::OnlineWindow;
    env
}

/// Fit the predictor on the environment's ground truth (default grid).
pub fn fitted_model(hw: &HardwareModel, flags: FeatureFlags, seed: u64) -> PredictorModel {
    let samples = profile_hardware(hw, &ProfileGrid::default(), seed).samples;
    fit(&samples, flags).expect("fit")
}

/// Run a simulation and enforce the budget-safety contract (criterion:
/// violations are hard failures on every acceptance run).
pub fn run_clean(
    env: &SimEnv,
    budget_ms: f64,
    model: &PredictorModel,
    hw_seed: u64,
    psm_seed: u64,
) -> (RunReport, RunMetrics) {
    let report = env
        .run_with_seeds(budget_ms, model, hw_seed, psm_seed)
        .expect("budget-safety violation or engine contract breach");
    assert_eq!(report.audit.latency_violations, 0);
    assert_eq!(report.audit.chunk_violations, 0);
    assert_eq!(report.audit.memory_violations, 0);
    let metrics = compute(&report.log.events, report.final_clock_ms, WINDOW_S).unwrap();
    (report, metrics)
}
