//! The experiment runner: drives arrivals, scheduling, plan auditing and
//! engine execution until the workload is served.
//!
//! Every plan is audited before execution against the scheduling contract:
//! offline work never pushes the predicted batch latency past the budget,
//! chunk and memory limits hold exactly. A violation aborts the run — it
//! is a bug, not a result.

use std::collections::HashSet;

use thiserror::Error;

use crate::engine::{BatchPlan, Engine, EngineConfig, EngineError, HardwareModel};
use crate::events::{Event, EventKind, EventLog, StepRecord};
use crate::predictor::{featurize, predict, PredictorModel};
use crate::scheduler::{Scheduler, SchedulerConfig};
use crate::workload::{Request, RequestClass, RequestId, RequestStream};

/// When a run stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    /// All requests (both classes) completed, or no further progress is
    /// possible.
    AllDone,
    /// All online requests completed and the clock passed the online
    /// stream's horizon; leftover offline work is abandoned.
    OnlineWindow,
    /// Fixed number of executed scheduling steps.
    Steps(u64),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AuditSummary {
    pub plans: u64,
    pub latency_violations: u64,
    pub chunk_violations: u64,
    pub memory_violations: u64,
    pub online_overdraft_steps: u64,
    pub emergency_online_preemptions: u64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("engine contract: {0}")]
    Engine(#[from] EngineError),
    #[error("budget safety violated at step {step}: {detail}")]
    BudgetViolation { step: u64, detail: String },
    #[error("run exceeded the safety cap of {0} steps")]
    SafetyCap(u64),
}

/// Everything a single simulation needs, minus the latency budget and the
/// per-trial seeds (which the profiler varies).
#[derive(Clone)]
pub struct SimEnv {
    pub online: RequestStream,
    pub offline: RequestStream,
    pub engine_cfg: EngineConfig,
    pub hw: HardwareModel,
    pub sched_cfg: SchedulerConfig,
    pub psm_seed: u64,
    pub termination: Termination,
}

#[derive(Debug)]
pub struct RunReport {
    pub log: EventLog,
    pub final_clock_ms: f64,
    pub steps_executed: u64,
    pub audit: AuditSummary,
    /// Prefill tokens skipped via prefix-cache credits.
    pub prefill_tokens_saved: u64,
    /// Requests admitted to the engine at least once.
    pub admitted: HashSet<RequestId>,
    pub preempt_count: u64,
}

const SAFETY_CAP: u64 = 5_000_000;

impl SimEnv {
    pub fn new(online: RequestStream, offline: RequestStream) -> Self {
        SimEnv {
            online,
            offline,
            engine_cfg: EngineConfig::default(),
            hw: HardwareModel {
                c0: 2.0,
                c1: 0.05,
                c2: 0.3,
                c3: 2e-6,
                c3b: 0.0,
                c4: 0.5,
                c5: 0.1,
                c_cross: 0.0,
                noise_pct: 0.0,
                parallel_scale: 1.0,
                seed: 0,
            },
            sched_cfg: SchedulerConfig::default(),
            psm_seed: 0,
            termination: Termination::OnlineWindow,
        }
    }

    /// Merged arrival list, sorted by `(arrival_ms, id)`. Request IDs must
    /// be unique across both streams.
    fn arrivals(&self) -> Vec<Request> {
        let mut all: Vec<Request> = self
            .online
            .requests
            .iter()
            .chain(self.offline.requests.iter())
            .cloned()
            .collect();
        all.sort_by_key(|r| (r.arrival_ms, r.id));
        let mut ids: Vec<RequestId> = all.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), all.len(), "request ids must be globally unique");
        all
    }

    pub fn run(&self, budget_ms: f64, model: &PredictorModel) -> Result<RunReport, RunError> {
        self.run_with_seeds(budget_ms, model, self.hw.seed, self.psm_seed)
    }

    /// Run one simulation with explicit noise/selection seeds (the
    /// profiler replicates probes across seeds).
    pub fn run_with_seeds(
        &self,
        budget_ms: f64,
        model: &PredictorModel,
        hw_seed: u64,
        psm_seed: u64,
    ) -> Result<RunReport, RunError> {
        let mut hw = self.hw;
        hw.seed = hw_seed;
        let mut sched_cfg = self.sched_cfg;
        sched_cfg.latency_budget_ms = budget_ms;
        let mut engine = Engine::new(self.engine_cfg, hw);
        let mut scheduler = Scheduler::new(sched_cfg, psm_seed);
        let mut log = EventLog::default();
        let mut audit = AuditSummary::default();
        let mut admitted = HashSet::new();
        let mut preempt_count = 0u64;

        let arrivals = self.arrivals();
        let online_total = self.online.requests.len() as u64;
        let mut online_done = 0u64;
        let mut offline_done = 0u64;
        let offline_total = self.offline.requests.len() as u64;
        let mut next_arrival = 0usize;
        let mut steps = 0u64;

        loop {
            // reveal arrivals due at the current clock
            let mut new_online = Vec::new();
            while next_arrival < arrivals.len()
                && (arrivals[next_arrival].arrival_ms as f64) <= engine.clock_ms()
            {
                let r = arrivals[next_arrival].clone();
                next_arrival += 1;
                log.push(Event {
                    t_ms: r.arrival_ms as f64,
                    kind: EventKind::Arrive,
                    request: r.id,
                    class: r.class,
                });
                if r.class == RequestClass::Online {
                    new_online.push(r.id);
                }
                scheduler.enqueue(r);
            }

            // build the step's plan
            let plan = if sched_cfg.lookahead {
                let pending = scheduler.take_pending().unwrap_or_default();
                let plan = scheduler.on_arrival_revalidate(pending, &new_online, &engine, model);
                if plan.is_empty() && !scheduler.is_idle() {
                    // nothing precomputed (bootstrap, or the queue filled
                    // while the mailbox was empty): plan synchronously
                    scheduler.plan_step(&engine, model)
                } else {
                    plan
                }
            } else {
                scheduler.plan_step(&engine, model)
            };

            if plan.entries.is_empty() && plan.preemptions.is_empty() {
                if next_arrival < arrivals.len() {
                    engine.fast_forward(arrivals[next_arrival].arrival_ms as f64);
                    continue;
                }
                break; // no work schedulable and none coming
            }
            if plan.entries.is_empty() {
                // memory-crisis repair without schedulable work: apply the
                // preemptions, then replan with the freed blocks
                audit.plans += 1;
                let preempted = scheduler.commit(&plan, &mut engine)?;
                for r in &preempted {
                    preempt_count += 1;
                    log.push(Event {
                        t_ms: engine.clock_ms(),
                        kind: EventKind::Preempt,
                        request: r.id,
                        class: r.class,
                    });
                }
                continue;
            }

            // audit against the scheduling contract
            audit.plans += 1;
            audit_plan(
                &plan,
                &engine,
                model,
                budget_ms,
                sched_cfg.chunk_tokens,
                steps,
                &mut audit,
            )?;

            let preempted = scheduler.commit(&plan, &mut engine)?;
            for r in &preempted {
                preempt_count += 1;
                log.push(Event {
                    t_ms: engine.clock_ms(),
                    kind: EventKind::Preempt,
                    request: r.id,
                    class: r.class,
                });
            }
            for e in &plan.entries {
                if e.admission.is_some() {
                    admitted.insert(e.request);
                }
            }
            let res = engine.step(&plan.entries)?;
            steps += 1;
            for id in &res.completed {
                if self.online.requests.iter().any(|r| r.id == *id) {
                    online_done += 1;
                } else {
                    offline_done += 1;
                }
            }
            scheduler.apply_step_result(&res.completed);
            log.events.extend(res.events.iter().copied());
            log.steps.push(StepRecord {
                t_ms: res.end_ms,
                step: res.step_index,
                s_p: res.features.s_p,
                s_d: res.features.s_d,
                n_p: res.features.n_p,
                n_d: res.features.n_d,
                latency_ms: res.latency_ms,
                predicted_ms: predict(model, &res.features),
            });

            if sched_cfg.lookahead {
                let pending = scheduler.plan_step(&engine, model);
                scheduler.store_pending(pending);
            }

            let done = match self.termination {
                Termination::AllDone => {
                    online_done == online_total && offline_done == offline_total
                }
                Termination::OnlineWindow => {
                    online_done == online_total
                        && engine.clock_ms() >= self.online.duration_ms as f64
                }
                Termination::Steps(n) => steps >= n,
            };
            if done {
                break;
            }
            if steps >= SAFETY_CAP {
                return Err(RunError::SafetyCap(SAFETY_CAP));
            }
        }

        audit.online_overdraft_steps = scheduler.online_overdraft_steps;
        audit.emergency_online_preemptions = scheduler.emergency_online_preemptions;
        log.events.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms));
        Ok(RunReport {
            final_clock_ms: engine.clock_ms(),
            steps_executed: steps,
            audit,
            prefill_tokens_saved: engine.prefill_tokens_saved,
            admitted,
            preempt_count,
            log,
        })
    }
}

/// The scheduling contract, checked on every emitted plan:
/// 1. offline additions keep the predicted batch latency within the budget
///    (online work may overdraw it; that is flagged, not forbidden),
/// 2. total prefill tokens fit the chunk size,
/// 3. the plan's block demand fits free memory plus what its preemptions
///    release.
fn audit_plan(
    plan: &BatchPlan,
    engine: &Engine,
    model: &PredictorModel,
    budget_ms: f64,
    chunk_tokens: u32,
    step: u64,
    audit: &mut AuditSummary,
) -> Result<(), RunError> {
    let eps = 1e-6 * budget_ms.max(1.0);
    let online_entries: Vec<_> = plan
        .entries
        .iter()
        .filter(|e| e.class == RequestClass::Online)
        .cloned()
        .collect();
    let total_pred = predict(model, &featurize(&plan.entries));
    let online_pred = predict(model, &featurize(&online_entries));
    if total_pred > budget_ms.max(online_pred) + eps {
        audit.latency_violations += 1;
        return Err(RunError::BudgetViolation {
            step,
            detail: format!(
                "predicted batch latency {total_pred:.4} ms exceeds budget {budget_ms:.4} ms \
                 (online-only part {online_pred:.4} ms)"
            ),
        });
    }
    let chunk: u64 = plan
        .entries
        .iter()
        .map(|e| e.prefill_tokens as u64)
        .sum();
    if chunk > chunk_tokens as u64 {
        audit.chunk_violations += 1;
        return Err(RunError::BudgetViolation {
            step,
            detail: format!("chunk overrun: {chunk} tokens planned, limit {chunk_tokens}"),
        });
    }
    let freed: u64 = plan
        .preemptions
        .iter()
        .filter_map(|&id| engine.running(id))
        .map(|st| st.blocks_held as u64)
        .sum();
    let demand: u64 = plan.entries.iter().map(|e| e.incr_blocks as u64).sum();
    if demand > engine.blocks_free() as u64 + freed {
        audit.memory_violations += 1;
        return Err(RunError::BudgetViolation {
            step,
            detail: format!(
                "block demand {demand} exceeds free {} + reclaimed {freed}",
                engine.blocks_free()
            ),
        });
    }
    Ok(())
}
