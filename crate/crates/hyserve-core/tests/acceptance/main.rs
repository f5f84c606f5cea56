//! Acceptance suite: one test per acceptance criterion, each printing a
//! PASS line with the measured values. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use hyserve_core::engine::{Engine, HardwareModel};
use hyserve_core::metrics::pearson;
use hyserve_core::predictor::{
    fit, get_max_tokens, mape, predict, profile_hardware, BatchFeatures, FeatureFlags,
    PredictorModel, PrefillView, ProfileGrid,
};
use hyserve_core::profiler::{
    baseline_run, check_compliance, search_budget_with, BudgetSearchConfig, ComplianceResult,
    ProbeKind, ResolvedSlo, SloMetric,
};
use hyserve_core::scheduler::{OfflinePolicy, Scheduler, SchedulerConfig};
use hyserve_core::sim::{SimEnv, Termination};
use hyserve_core::workload::{Request, RequestClass, RequestStream};

// ---------------------------------------------------------------------
// Criterion 1: predictor accuracy
// ---------------------------------------------------------------------
#[test]
fn c01_predictor_accuracy() {
    let t0 = Instant::now();
    // ground truth inside the feature family, 1% multiplicative noise
    let mut hw = reference_hw();
    hw.noise_pct = 0.01;
    let out = profile_hardware(&hw, &ProfileGrid::default(), 41);
    let split = out.samples.len() * 4 / 5;
    let model = fit(&out.samples[..split], FeatureFlags::default()).unwrap();
    let holdout = mape(&model, &out.samples[split..]);
    assert!(holdout <= 0.02, "held-out MAPE {holdout} > 2%");

    let mut exact_hw = hw;
    exact_hw.noise_pct = 0.0;
    let out = profile_hardware(&exact_hw, &ProfileGrid::default(), 42);
    let split = out.samples.len() * 4 / 5;
    let model = fit(&out.samples[..split], FeatureFlags::default()).unwrap();
    let exact = mape(&model, &out.samples[split..]);
    assert!(exact <= 1e-6, "noise-free MAPE {exact} > 1e-6");
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0);
    println!(
        "[acceptance] C1 predictor-accuracy: PASS (noisy holdout MAPE {:.4}%, noise-free {:.2e}, {:.2}s)",
        holdout * 100.0,
        exact,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 2: predictor cost
// ---------------------------------------------------------------------
#[test]
fn c02_predictor_cost() {
    let hw = reference_hw();
    let grid = ProfileGrid {
        prefill_tokens: vec![0, 32, 64, 128, 256, 512, 1024, 2048, 3072, 4096],
        prefill_requests: vec![1, 2, 4, 8],
        decode_requests: (0..64).collect(),
        decode_steps: vec![1, 2],
        repeats: 18,
    };
    let samples = profile_hardware(&hw, &grid, 43).samples;
    assert!(
        samples.len() >= 80_000,
        "need at least 80k samples, got {}",
        samples.len()
    );
    let t0 = Instant::now();
    let model = fit(&samples, FeatureFlags::default()).unwrap();
    let fit_ms = t0.elapsed().as_secs_f64() * 1000.0;
    assert!(fit_ms <= 100.0, "fit of {} samples took {fit_ms:.1} ms", samples.len());

    // per-call latency of predict + get_max_tokens, median over many calls
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut latencies = Vec::with_capacity(2001);
    let mut sink = 0.0f64;
    for _ in 0..2001 {
        let acc = BatchFeatures::from_counts(
            rng.random_range(0..2048),
            rng.random_range(0..32),
            rng.random_range(0..4),
            rng.random_range(0..32),
        );
        let view = PrefillView {
            remaining_tokens: rng.random_range(1..4096),
            kv_tokens: rng.random_range(0..1024),
            blocks_held: 0,
        };
        let t = Instant::now();
        sink += predict(&model, &acc);
        let (l, t_req) = get_max_tokens(&model, 25.0, 4096, 4096, &view, &acc, 16);
        latencies.push(t.elapsed().as_nanos() as f64);
        sink += l as f64 + t_req;
    }
    latencies.sort_by(f64::total_cmp);
    let median_us = latencies[latencies.len() / 2] / 1000.0;
    assert!(median_us <= 50.0, "predict+solve median {median_us:.2} us");
    assert!(sink.is_finite());
    println!(
        "[acceptance] C2 predictor-cost: PASS (fit {} samples in {:.1} ms, predict+solve median {:.2} us)",
        samples.len(),
        fit_ms,
        median_us
    );
}

// ---------------------------------------------------------------------
// Criteria 3 & 4 share the reference hybrid environment.
// ---------------------------------------------------------------------

fn hybrid_env() -> SimEnv {
    let online = bursty_online(6.0, 31);
    let offline = offline_plain(12.5, (64, 128), (64, 128));
    reference_env(online, offline)
}

const PROFILING_SEEDS: [u64; 2] = [501, 502];
const EVAL_SEEDS: [u64; 3] = [601, 602, 603];

fn search_cfg() -> BudgetSearchConfig {
    BudgetSearchConfig {
        lo_ms: 2.5,
        hi_ms: 66.5,
        eps_ms: 4.0,
        trials: 2,
        safety: 0.95,
    }
}

/// Profile one SLO on the profiling seeds; returns (budget, threshold).
fn profile_one(env: &SimEnv, model: &PredictorModel, metric: SloMetric, tolerance: f64, baselines: &[f64]) -> (f64, f64) {
    profile_one_with(env, model, metric, tolerance, baselines, &search_cfg())
}

fn profile_one_with(
    env: &SimEnv,
    model: &PredictorModel,
    metric: SloMetric,
    tolerance: f64,
    baselines: &[f64],
    cfg: &BudgetSearchConfig,
) -> (f64, f64) {
    let baseline_ms = baselines.iter().sum::<f64>() / baselines.len() as f64;
    let slo = ResolvedSlo {
        metric,
        tolerance,
        baseline_ms,
        threshold_ms: baseline_ms * (1.0 + tolerance),
    };
    let (l_star, _probes) = search_budget_with(cfg, |budget| {
        check_compliance(env, model, budget, &[slo], &PROFILING_SEEDS, cfg.safety)
    })
    .expect("profiling range feasible");
    (l_star, slo.threshold_ms)
}

#[test]
fn c03_slo_compliance() {
    let t0 = Instant::now();
    let env = hybrid_env();
    let model = fitted_model(&env.hw, FeatureFlags::default(), 1001);
    // baselines per profiling seed, shared across the twelve combinations
    let profiling_baselines: Vec<_> = PROFILING_SEEDS
        .iter()
        .map(|&s| baseline_run(&env, &model, s).unwrap())
        .collect();
    let mut lines = Vec::new();
    for metric in SloMetric::ALL {
        let base: Vec<f64> = profiling_baselines.iter().map(|b| b.get(metric)).collect();
        let mut budgets = Vec::new();
        for tolerance in [0.1, 0.25, 0.5] {
            let (budget, threshold) = profile_one(&env, &model, metric, tolerance, &base);
            for &seed in &EVAL_SEEDS {
                let (_, m) = run_clean(&env, budget, &model, seed, env.psm_seed ^ seed);
                let achieved = m.get(metric);
                assert!(
                    achieved <= threshold,
                    "{} tol {tolerance}: achieved {achieved:.3} > threshold {threshold:.3} (L*={budget:.2}, seed {seed})",
                    metric.as_str()
                );
            }
            budgets.push(budget);
            lines.push(format!("{}@{tolerance}: L*={budget:.1}", metric.as_str()));
        }
        // looser tolerance admits a weakly larger budget
        for pair in budgets.windows(2) {
            assert!(pair[1] >= pair[0], "{}: budgets not monotone: {budgets:?}", metric.as_str());
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "criterion 3 took {elapsed:.0}s, budget is 300s");
    println!(
        "[acceptance] C3 slo-compliance: PASS (12/12 combos on {} eval seeds, {:.0}s; {})",
        EVAL_SEEDS.len(),
        elapsed,
        lines.join(", ")
    );
}

#[test]
fn c04_throughput_behavior() {
    let env = hybrid_env();
    let model = fitted_model(&env.hw, FeatureFlags::default(), 1001);
    let metric = SloMetric::P99Tbt;
    let baselines: Vec<f64> = PROFILING_SEEDS
        .iter()
        .map(|&s| baseline_run(&env, &model, s).unwrap().get(metric))
        .collect();
    // pure-online throughput on the evaluation seed
    let mut online_env = env.clone();
    online_env.offline = RequestStream::default();
    let (_, base_metrics) = run_clean(&online_env, f64::INFINITY, &model, EVAL_SEEDS[0], 7);
    let online_only_tps = base_metrics.total_tps;

    let mut offline_tps = Vec::new();
    let mut total_tps = Vec::new();
    for tolerance in [0.1, 0.25, 0.5] {
        let (budget, _) = profile_one(&env, &model, metric, tolerance, &baselines);
        let (_, m) = run_clean(&env, budget, &model, EVAL_SEEDS[0], env.psm_seed ^ EVAL_SEEDS[0]);
        assert!(
            m.total_tps >= online_only_tps,
            "hybrid total {:.1} < online-only {online_only_tps:.1} at tol {tolerance}",
            m.total_tps
        );
        offline_tps.push(m.offline_tps);
        total_tps.push(m.total_tps);
    }
    for pair in offline_tps.windows(2) {
        assert!(
            pair[1] >= pair[0] - 1e-9,
            "offline TPS not nondecreasing: {offline_tps:?}"
        );
    }
    let gain = total_tps[2] / online_only_tps;
    assert!(
        gain >= 1.5,
        "total TPS gain {gain:.2}x < 1.5x at tolerance 0.5"
    );
    println!(
        "[acceptance] C4 throughput: PASS (online-only {online_only_tps:.0} tok/s; hybrid {:.0}/{:.0}/{:.0} tok/s at tol 0.1/0.25/0.5; gain {gain:.2}x)",
        total_tps[0], total_tps[1], total_tps[2]
    );
}

// ---------------------------------------------------------------------
// Criterion 5: PSM throughput gain vs the saved-prefill oracle
// ---------------------------------------------------------------------
#[test]
fn c05_psm_gain() {
    // prefill-dominated cost model (decode and overheads negligible)
    let hw = HardwareModel {
        c0: 0.1,
        c1: 1.0,
        c2: 0.02,
        c3: 0.0,
        c3b: 0.0,
        c4: 0.02,
        c5: 0.01,
        c_cross: 0.0,
        noise_pct: 0.0,
        parallel_scale: 1.0,
        seed: 0,
    };
    let (n_groups, per_group, shared, unique) = (8u32, 8u32, 256u32, 256u32);
    let offline = offline_backlog(n_groups, per_group, shared, unique);
    let total_prompt: u64 = offline.requests.iter().map(|r| r.prompt_tokens as u64).sum();
    let saved_analytic = (n_groups * (per_group - 1) * shared) as u64;

    let mut runs = Vec::new();
    for utility in [1.0, 0.0] {
        let mut env = SimEnv::new(RequestStream::default(), offline.clone());
        env.hw = hw;
        env.engine_cfg.kv_blocks = 4096;
        // small cache: consecutive admissions share, interleaved ones miss
        env.engine_cfg.prefix_cache_entries = 8;
        env.sched_cfg = SchedulerConfig {
            latency_budget_ms: 1e6,
            chunk_tokens: 512,
            offline_policy: OfflinePolicy::Psm,
            psm_utility: utility,
            lookahead: false,
            ..SchedulerConfig::default()
        };
        env.termination = Termination::AllDone;
        let model = PredictorModel::from_hardware(&hw, FeatureFlags { s_d2: false });
        let (report, metrics) = run_clean(&env, 1e6, &model, 0, 7);
        runs.push((report, metrics));
    }
    let (dfs_report, dfs_metrics) = &runs[0];
    let (fcfs_report, fcfs_metrics) = &runs[1];
    assert_eq!(
        dfs_report.prefill_tokens_saved, saved_analytic,
        "DFS order must save exactly the shared prefixes"
    );
    assert_eq!(
        fcfs_report.prefill_tokens_saved, 0,
        "arrival order must have no sharing opportunities"
    );
    let measured = dfs_metrics.offline_tps / fcfs_metrics.offline_tps;
    let analytic = (total_prompt - fcfs_report.prefill_tokens_saved) as f64
        / (total_prompt - dfs_report.prefill_tokens_saved) as f64;
    let rel = (measured / analytic - 1.0).abs();
    assert!(
        rel <= 0.10,
        "PSM gain {measured:.3}x vs analytic {analytic:.3}x (off by {:.1}%)",
        rel * 100.0
    );
    println!(
        "[acceptance] C5 psm-gain: PASS (measured {measured:.3}x vs analytic {analytic:.3}x, delta {:.1}%)",
        rel * 100.0
    );
}

// ---------------------------------------------------------------------
// Criterion 6: starvation of cold prefixes
// ---------------------------------------------------------------------

/// Adversarial stream: a steady flood of hot-prefix offline requests plus
/// one cold request that shares nothing.
fn starvation_workload() -> (RequestStream, u64) {
    const HOT: u64 = 5;
    const COLD: u64 = 6;
    let mut requests = Vec::new();
    let mk = |id: u64, first: (u64, u32), second: (u64, u32), arrival: u64| Request {
        id,
        class: RequestClass::Offline,
        arrival_ms: arrival,
        prompt_path: vec![first, second],
        prompt_tokens: first.1 + second.1,
        output_tokens: 2,
        priority: 100,
    };
    // initial queue: two hot, the cold one, another hot
    requests.push(mk(0, (HOT, 64), (100, 64), 0));
    requests.push(mk(1, (HOT, 64), (101, 64), 1));
    let cold_id = 2;
    requests.push(mk(cold_id, (COLD, 64), (102, 64), 2));
    requests.push(mk(3, (HOT, 64), (103, 64), 3));
    // continuous hot arrivals, faster than they can be served: with the
    // shared prefix credited, service peaks near two requests per 15 ms
    // step, so arrivals come every 6 ms
    for i in 0..1500u64 {
        requests.push(mk(10 + i, (HOT, 64), (200 + i, 64), 4 + i * 6));
    }
    (RequestStream::new(requests, 0), cold_id)
}

fn starvation_env(utility: f64, steps: u64, psm_seed: u64) -> (SimEnv, PredictorModel) {
    let (offline, _) = starvation_workload();
    let hw = HardwareModel {
        c0: 1.0,
        c1: 0.1,
        c2: 0.05,
        c3: 0.0,
        c3b: 0.0,
        c4: 0.5,
        c5: 0.2,
        c_cross: 0.0,
        noise_pct: 0.0,
        parallel_scale: 1.0,
        seed: 0,
    };
    let mut env = SimEnv::new(RequestStream::default(), offline);
    env.hw = hw;
    env.engine_cfg.kv_blocks = 4096;
    env.sched_cfg = SchedulerConfig {
        // one admission per step: intercept 1 + marginal(128 tok) = 13.3
        latency_budget_ms: 15.0,
        chunk_tokens: 512,
        offline_policy: OfflinePolicy::Psm,
        psm_utility: utility,
        lookahead: false,
        ..SchedulerConfig::default()
    };
    env.psm_seed = psm_seed;
    env.termination = Termination::Steps(steps);
    let model = PredictorModel::from_hardware(&env.hw, FeatureFlags { s_d2: false });
    (env, model)
}

#[test]
fn c06_starvation() {
    let (_, cold_id) = starvation_workload();
    // pure DFS order starves the cold prefix indefinitely
    let (env, model) = starvation_env(1.0, 500, 7);
    let (report, _) = run_clean(&env, 15.0, &model, 0, 7);
    assert!(
        !report.admitted.contains(&cold_id),
        "cold request was scheduled under u=1 within 500 steps"
    );
    // the fairness extension completes it quickly on every seed
    for seed in 0..10u64 {
        let (env, model) = starvation_env(0.5, 200, 1000 + seed);
        let (report, metrics) = run_clean(&env, 15.0, &model, 0, 1000 + seed);
        let completed = report
            .log
            .events
            .iter()
            .any(|e| e.request == cold_id && e.kind == hyserve_core::events::EventKind::Complete);
        assert!(
            completed,
            "cold request not completed within 200 steps at seed {seed} \
             (completed_offline {})",
            metrics.completed_offline
        );
    }
    println!(
        "[acceptance] C6 starvation: PASS (u=1 starves for 500 steps; u=0.5 completes on 10/10 seeds within 200 steps)"
    );
}

// ---------------------------------------------------------------------
// Criterion 7: temporal adaptation (anticorrelation with online load)
// ---------------------------------------------------------------------
#[test]
fn c07_temporal_adaptation() {
    let online = bursty_online(12.0, 77);
    let offline = offline_plain(25.0, (64, 128), (64, 128));
    let mut env = reference_env(online, offline);
    env.hw.noise_pct = 0.0;
    let model = fitted_model(&env.hw, FeatureFlags::default(), 1001);
    // a budget with real offline headroom so the adaptation is visible
    let baselines: Vec<f64> = PROFILING_SEEDS
        .iter()
        .map(|&s| baseline_run(&env, &model, s).unwrap().get(SloMetric::P99Tbt))
        .collect();
    let (budget, _) = profile_one(&env, &model, SloMetric::P99Tbt, 0.5, &baselines);
    let (_, metrics) = run_clean(&env, budget, &model, 88, 7);
    // drop the partial last window
    let complete: Vec<_> = metrics
        .breakdown
        .windows
        .iter()
        .filter(|w| (w.window_start_s + WINDOW_S) * 1000.0 <= metrics.horizon_ms)
        .collect();
    let qps: Vec<f64> = complete.iter().map(|w| w.online_qps).collect();
    let tps: Vec<f64> = complete.iter().map(|w| w.offline_tps).collect();
    let corr = pearson(&qps, &tps).expect("enough windows");
    assert!(
        corr <= -0.5,
        "online QPS vs offline TPS correlation {corr:.3} > -0.5 (budget {budget:.1})"
    );
    println!("[acceptance] C7 temporal-adaptation: PASS (Pearson correlation {corr:.3} at L*={budget:.1} ms)");
}

// ---------------------------------------------------------------------
// Criterion 8: budget safety across acceptance runs
// ---------------------------------------------------------------------
#[test]
fn c08_budget_safety() {
    // every run in this suite goes through run_clean, which fails hard on
    // any violation; this test additionally exercises aggressive budgets
    // and memory pressure and inspects the audit counters directly
    let online = bursty_online(6.0, 31);
    let offline = offline_plain(12.5, (64, 128), (64, 128));
    let mut env = reference_env(online, offline);
    env.engine_cfg.kv_blocks = 512; // heavy memory pressure: preemption path
    let model = fitted_model(&env.hw, FeatureFlags::default(), 1001);
    let mut plans = 0u64;
    let mut preemptions = 0u64;
    for budget in [3.0, 8.0, 25.0, 80.0] {
        let (report, _) = run_clean(&env, budget, &model, 11, 13);
        plans += report.audit.plans;
        preemptions += report.preempt_count;
    }
    assert!(plans > 0);
    println!(
        "[acceptance] C8 budget-safety: PASS ({plans} plans audited across 4 budgets, 0 violations, {preemptions} preemptions exercised)"
    );
}

// ---------------------------------------------------------------------
// Criterion 9: oracle equivalence on randomized small instances
// ---------------------------------------------------------------------

fn random_request(rng: &mut ChaCha8Rng, id: u64, online: bool) -> Request {
    let segments = rng.random_range(1..=3u32);
    let mut path = Vec::new();
    for d in 0..segments {
        // a small alphabet per depth creates real sharing and credit deps
        let seg = (d as u64) << 8 | rng.random_range(0..4u64);
        let tokens = rng.random_range(8..=48u32);
        path.push((seg, tokens));
    }
    let prompt: u32 = path.iter().map(|&(_, t)| t).sum();
    Request {
        id,
        class: if online { RequestClass::Online } else { RequestClass::Offline },
        arrival_ms: rng.random_range(0..50u64),
        prompt_path: path,
        prompt_tokens: prompt,
        output_tokens: rng.random_range(1..=12),
        priority: if online { 0 } else { 100 },
    }
}

#[test]
fn c09_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut comparisons = 0usize;
    let mut scenario = 0usize;
    while comparisons < 1000 {
        scenario += 1;
        let hw = HardwareModel {
            c0: rng.random_range(0.1..2.0),
            c1: rng.random_range(0.01..0.2),
            c2: rng.random_range(0.01..0.5),
            c3: if rng.random_bool(0.5) { 1e-5 } else { 0.0 },
            c3b: 0.0,
            c4: rng.random_range(0.0..1.0),
            c5: rng.random_range(0.0..0.5),
            c_cross: 0.0,
            noise_pct: if rng.random_bool(0.3) { 0.05 } else { 0.0 },
            parallel_scale: 1.0,
            seed: rng.random(),
        };
        let sched_cfg = SchedulerConfig {
            latency_budget_ms: rng.random_range(3.0..40.0),
            chunk_tokens: rng.random_range(32..512),
            offline_reserve_blocks: rng.random_range(0..16),
            offline_policy: if rng.random_bool(0.7) {
                OfflinePolicy::Psm
            } else {
                OfflinePolicy::Fcfs
            },
            psm_utility: [0.0, 0.3, 1.0][rng.random_range(0..3usize)],
            preemption_mode: if rng.random_bool(0.5) {
                hyserve_core::engine::PreemptionMode::Preserve
            } else {
                hyserve_core::engine::PreemptionMode::Discard
            },
            lookahead: false,
            ..SchedulerConfig::default()
        };
        let engine_cfg = hyserve_core::engine::EngineConfig {
            kv_blocks: rng.random_range(16..128),
            block_size: 16,
            prefix_cache_entries: rng.random_range(4..32),
            readmit_penalty_ms: if rng.random_bool(0.5) { 0.5 } else { 0.0 },
        };
        let model = PredictorModel::from_hardware(&hw, FeatureFlags { s_d2: false });
        let mut engine = Engine::new(engine_cfg, hw);
        let psm_seed: u64 = rng.random();
        let mut scheduler = Scheduler::new(sched_cfg, psm_seed);

        let n_requests = rng.random_range(2..=16usize);
        let mut pending: Vec<Request> = (0..n_requests)
            .map(|i| {
                let online = rng.random_bool(0.5);
                random_request(&mut rng, i as u64, online)
            })
            .collect();
        // stagger arrivals: half now, the rest trickle in
        let initial = pending.len() / 2 + 1;
        for r in pending.drain(..initial) {
            scheduler.enqueue(r);
        }

        for _ in 0..12 {
            let rng_snapshot = scheduler.psm_rng_snapshot();
            let reference = oracle::reference_plan(&scheduler, &engine, &model, rng_snapshot);
            let plan = scheduler.plan_step(&engine, &model);
            assert_eq!(
                plan, reference,
                "scenario {scenario}: production plan diverges from the reference"
            );
            comparisons += 1;
            if plan.is_empty() {
                if let Some(r) = pending.pop() {
                    scheduler.enqueue(r);
                    continue;
                }
                break;
            }
            scheduler.commit(&plan, &mut engine).unwrap();
            if !plan.entries.is_empty() {
                let res = engine.step(&plan.entries).unwrap();
                scheduler.apply_step_result(&res.completed);
            }
            if let Some(r) = pending.pop() {
                scheduler.enqueue(r);
            }
        }
    }
    println!(
        "[acceptance] C9 oracle-equivalence: PASS ({comparisons} plans over {scenario} randomized instances, all exact)"
    );
}

// ---------------------------------------------------------------------
// Criterion 10: robustness to predictor error
// ---------------------------------------------------------------------
#[test]
fn c10_predictor_error_robustness() {
    // Tune the cross term until the model's error on batches the system
    // actually executes sits around 20%. Grid-level MAPE would be
    // dominated by huge cells (S_p * S_d up to 5e5) that no run produces.
    // Shorter chunks keep the unmodeled cross term at the intended ~20%
    // scale instead of exploding on full-chunk prefill steps.
    let c10_env = || {
        let online = bursty_online(6.0, 31);
        let offline = offline_plain(12.5, (64, 128), (64, 128));
        let mut env = reference_env(online, offline);
        env.hw.noise_pct = 0.0;
        env.sched_cfg.chunk_tokens = 128;
        env
    };
    let realized_mape = |c_cross: f64| -> (PredictorModel, f64) {
        let mut hw = reference_hw();
        hw.noise_pct = 0.0;
        hw.c_cross = c_cross;
        let samples = profile_hardware(&hw, &ProfileGrid::default(), 1001).samples;
        let model = fit(&samples, FeatureFlags::default()).unwrap();
        let mut env = c10_env();
        env.hw.c_cross = c_cross;
        env.termination = Termination::Steps(4000);
        let report = env.run_with_seeds(12.0, &model, 1, 7).expect("tuning run");
        let errs: Vec<f64> = report
            .log
            .steps
            .iter()
            .map(|s| (s.predicted_ms - s.latency_ms).abs() / s.latency_ms)
            .collect();
        (model, errs.iter().sum::<f64>() / errs.len() as f64)
    };
    let mut lo = 1e-6f64;
    let mut hi = 1e-2f64;
    let mut chosen = None;
    for _ in 0..30 {
        let mid = (lo * hi).sqrt();
        let (model, err) = realized_mape(mid);
        if (0.15..=0.25).contains(&err) {
            chosen = Some((mid, model, err));
            break;
        }
        if err < 0.20 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (c_cross, bad_model, err) = chosen.expect("cross term giving 15-25% realized MAPE");

    let metric = SloMetric::P99Tbt;
    let tolerance = 0.25;
    let run_case = |cross: f64, model: &PredictorModel| {
        let mut env = c10_env();
        env.hw.c_cross = cross;
        let baselines: Vec<f64> = PROFILING_SEEDS
            .iter()
            .map(|&s| baseline_run(&env, model, s).unwrap().get(metric))
            .collect();
        // a floor below the model intercept admits no offline work at all,
        // so the low end of the range is compliant by construction even
        // under a badly misfitted predictor
        let cfg = BudgetSearchConfig {
            lo_ms: 1.0,
            ..search_cfg()
        };
        let (budget, threshold) = profile_one_with(&env, model, metric, tolerance, &baselines, &cfg);
        let (_, m) = run_clean(&env, budget, model, EVAL_SEEDS[0], env.psm_seed ^ EVAL_SEEDS[0]);
        (m.get(metric), threshold, m.offline_tps, budget)
    };

    let mut accurate_hw = reference_hw();
    accurate_hw.noise_pct = 0.0;
    let accurate_model = fitted_model(&accurate_hw, FeatureFlags::default(), 1001);
    let (ach_a, thr_a, offline_a, _) = run_case(0.0, &accurate_model);
    assert!(ach_a <= thr_a);
    let (ach_b, thr_b, offline_b, budget_b) = run_case(c_cross, &bad_model);
    assert!(
        ach_b <= thr_b,
        "SLO violated under predictor error: {ach_b:.3} > {thr_b:.3} (L* {budget_b:.2})"
    );
    assert!(
        offline_b >= 0.5 * offline_a,
        "offline throughput collapsed: {offline_b:.1} < half of {offline_a:.1}"
    );
    println!(
        "[acceptance] C10 robustness: PASS (predictor MAPE {:.1}%, SLO held, offline TPS {:.0} vs accurate {:.0})",
        err * 100.0,
        offline_b,
        offline_a
    );
}

// ---------------------------------------------------------------------
// Criterion 11: profiler correctness on a stubbed oracle
// ---------------------------------------------------------------------
#[test]
fn c11_profiler_correctness() {
    let mut worst_gap = 0.0f64;
    for &boundary in &[7.3, 23.9, 55.001, 120.0] {
        let cfg = BudgetSearchConfig {
            lo_ms: 1.0,
            hi_ms: 129.0,
            eps_ms: 0.5,
            trials: 1,
            safety: 1.0,
        };
        let (l, probes) = search_budget_with(&cfg, |b| {
            Ok(ComplianceResult {
                pass: b <= boundary,
                achieved_ms: vec![],
            })
        })
        .unwrap();
        assert!(l <= boundary, "returned budget must be compliant");
        assert!(boundary - l <= cfg.eps_ms, "gap {} > eps", boundary - l);
        worst_gap = worst_gap.max(boundary - l);
        let fast_probes = probes.iter().filter(|p| p.kind != ProbeKind::Precondition).count();
        let bound = ((cfg.hi_ms - cfg.lo_ms) / cfg.eps_ms).log2().ceil() as usize + 1;
        assert!(fast_probes <= bound, "{fast_probes} probes > bound {bound}");
    }
    println!(
        "[acceptance] C11 profiler-correctness: PASS (boundary recovered within eps on 4 cases, worst gap {worst_gap:.3} ms)"
    );
}

// ---------------------------------------------------------------------
// Criterion 12: per-step scheduling cost scales (near-)linearly
// ---------------------------------------------------------------------
#[test]
fn c12_scheduling_complexity() {
    let hw = HardwareModel {
        c0: 1.0,
        c1: 0.05,
        c2: 0.1,
        c3: 0.0,
        c3b: 0.0,
        c4: 0.2,
        c5: 0.05,
        c_cross: 0.0,
        noise_pct: 0.0,
        parallel_scale: 1.0,
        seed: 1,
    };
    let model = PredictorModel::from_hardware(&hw, FeatureFlags { s_d2: false });
    let sizes = [16usize, 64, 256, 1024];
    let mut medians_us = Vec::new();
    for &n in &sizes {
        let engine_cfg = hyserve_core::engine::EngineConfig {
            kv_blocks: (n as u32) * 4,
            block_size: 16,
            prefix_cache_entries: 16,
            readmit_penalty_ms: 0.0,
        };
        let mut engine = Engine::new(engine_cfg, hw);
        let mut scheduler = Scheduler::new(
            SchedulerConfig {
                latency_budget_ms: 1e9,
                chunk_tokens: 16 * n as u32,
                offline_policy: OfflinePolicy::Psm,
                psm_utility: 1.0,
                lookahead: false,
                ..SchedulerConfig::default()
            },
            3,
        );
        for i in 0..n as u64 {
            scheduler.enqueue(Request {
                id: i,
                class: RequestClass::Offline,
                arrival_ms: i,
                prompt_path: vec![(1 << 30 | i, 16)],
                prompt_tokens: 16,
                output_tokens: 10_000,
                priority: 100,
            });
        }
        // admit everything and move it to decode
        let plan = scheduler.plan_step(&engine, &model);
        assert_eq!(plan.entries.len(), n);
        scheduler.commit(&plan, &mut engine).unwrap();
        let res = engine.step(&plan.entries).unwrap();
        scheduler.apply_step_result(&res.completed);
        assert_eq!(scheduler.running_offline().len(), n);
        // measure pure planning over the steady decode state; the best
        // median of several rounds filters out scheduler contention from
        // concurrently running tests
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let reps = 64;
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                let plan = scheduler.plan_step(&engine, &model);
                times.push(t0.elapsed().as_nanos() as f64 / 1000.0);
                assert_eq!(plan.entries.len(), n);
            }
            times.sort_by(f64::total_cmp);
            best = best.min(times[reps / 2]);
        }
        medians_us.push(best);
    }
    // fitted exponent of time vs n on a log-log scale
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = medians_us.iter().map(|&t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    assert!(slope <= 1.2, "scaling exponent {slope:.3} > 1.2 ({medians_us:?})");
    let at_256 = medians_us[2];
    assert!(at_256 <= 1000.0, "step planning at n=256 took {at_256:.1} us");
    println!(
        "[acceptance] C12 scheduling-complexity: PASS (exponent {slope:.2}, medians {:?} us for n = 16/64/256/1024)",
        medians_us.iter().map(|t| t.round()).collect::<Vec<_>>()
    );
}
