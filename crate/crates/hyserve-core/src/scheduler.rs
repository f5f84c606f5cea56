//! Two-phase SLO-aware scheduling.
//!
//! Each engine step is planned in two phases. The online phase serves
//! latency-sensitive requests FCFS, preempting lower-priority offline
//! requests when memory runs short. The offline phase then fills whatever
//! latency budget, chunk budget and memory remain, admitting offline work
//! only while the predictor says the batch still fits the profiled
//! per-iteration budget.
//!
//! Planning is speculative: a [`BatchPlan`] records intended entries,
//! preemptions and admissions without touching any state, so a plan can be
//! computed one step ahead (the asynchronous lookahead workflow), patched
//! when new requests arrive, and only then committed and executed.
//!
//! Budget accounting starts the walk at `L - predict(empty batch)`: the
//! model's intercept is a fixed per-step cost, so pre-charging it makes
//! "the marginals fit the budget" imply "the predicted batch latency is at
//! most L".

use std::collections::{HashMap, HashSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    get_num_blocks, AdmissionInfo, BatchPlan, Engine, EngineError, Phase, PlanEntry,
    PlanEntryKind, PreemptionMode, SavedProgress,
};
use crate::predictor::{
    get_max_tokens, predict, predict_decode_marginal, BatchFeatures, PredictorModel, PrefillView,
};
use crate::psm::{psm_offline_schedule, PsmQueue};
use crate::workload::{Request, RequestClass, RequestId, SegmentId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnlinePolicy {
    Fcfs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OfflinePolicy {
    Fcfs,
    Psm,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Per-iteration latency budget L (from the profiler).
    pub latency_budget_ms: f64,
    /// Chunk size C: max prefill tokens per iteration.
    pub chunk_tokens: u32,
    /// Offline memory reserve M_off in blocks: how far online admissions
    /// may overdraw free memory before offline requests are preempted to
    /// cover the difference.
    pub offline_reserve_blocks: u32,
    pub online_policy: OnlinePolicy,
    pub preemption_mode: PreemptionMode,
    /// Compute each step's plan before that step's arrivals are revealed,
    /// then repair it (the asynchronous workflow, emulated deterministically).
    pub lookahead: bool,
    pub offline_policy: OfflinePolicy,
    /// Utility ratio u for PSM fair selection.
    pub psm_utility: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            latency_budget_ms: 50.0,
            chunk_tokens: 512,
            offline_reserve_blocks: 0,
            online_policy: OnlinePolicy::Fcfs,
            preemption_mode: PreemptionMode::Preserve,
            lookahead: true,
            offline_policy: OfflinePolicy::Psm,
            psm_utility: 1.0,
        }
    }
}

/// A request waiting in a queue, possibly carrying progress from an
/// earlier preemption.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedRequest {
    pub request: Request,
    pub progress: Option<SavedProgress>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TryOutcome {
    Scheduled,
    /// Latency (or chunk) budget is the binding constraint; preemption
    /// cannot help.
    BudgetFail,
    /// Memory is the binding constraint; preempting lower-priority
    /// requests can help.
    MemFail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SchedPhase {
    Online,
    Offline,
}

/// Speculative planning context: seeded from the live engine state, it
/// accumulates entries and budget decrements without mutating anything.
pub struct PlanCtx<'a> {
    engine: &'a Engine,
    model: &'a PredictorModel,
    phase: SchedPhase,
    pub acc: BatchFeatures,
    /// Remaining latency budget (starts at L minus the predicted cost of
    /// an empty batch).
    pub t: f64,
    /// Remaining chunk tokens.
    pub c: u32,
    /// Budget memory: during the online phase this includes the offline
    /// overdraft line, so it may exceed the physically free blocks.
    pub m: i64,
    /// Physically unallocated blocks after the planned entries and
    /// preemptions; may dip negative during the online phase and is
    /// repaired by offline preemption before phase two.
    pub phys: i64,
    entries: Vec<PlanEntry>,
    preempted: Vec<RequestId>,
    preempted_set: HashSet<RequestId>,
    claimed: HashSet<RequestId>,
    /// Path prefixes inserted by admissions planned in this batch, keyed
    /// to the admission that inserts them.
    overlay: HashMap<Vec<SegmentId>, RequestId>,
    online_overdraft: bool,
}

impl<'a> PlanCtx<'a> {
    fn new(
        engine: &'a Engine,
        model: &'a PredictorModel,
        t: f64,
        c: u32,
        m: i64,
        phys: i64,
    ) -> Self {
        PlanCtx {
            engine,
            model,
            phase: SchedPhase::Online,
            acc: BatchFeatures::zero(),
            t,
            c,
            m,
            phys,
            entries: Vec::new(),
            preempted: Vec::new(),
            preempted_set: HashSet::new(),
            claimed: HashSet::new(),
            overlay: HashMap::new(),
            online_overdraft: false,
        }
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn claimed(&self) -> &HashSet<RequestId> {
        &self.claimed
    }

    pub fn is_preempted(&self, id: RequestId) -> bool {
        self.preempted_set.contains(&id)
    }

    pub fn running_phase(&self, id: RequestId) -> Option<Phase> {
        self.engine.running(id).map(|r| r.phase)
    }

    fn mem_cap(&self) -> u32 {
        self.m.clamp(0, u32::MAX as i64) as u32
    }

    fn charge_blocks(&mut self, blocks: u32) {
        self.m -= blocks as i64;
        self.phys -= blocks as i64;
    }

    fn release_blocks(&mut self, blocks: u32) {
        self.m += blocks as i64;
        self.phys += blocks as i64;
    }

    /// Schedule one decode iteration for a running request. Online decodes
    /// are always scheduled (overdrawing the latency budget is flagged, not
    /// prevented); offline decodes must fit both the latency budget and
    /// physically free memory.
    pub fn try_decode(&mut self, id: RequestId) -> TryOutcome {
        let st = self.engine.running(id).expect("running");
        let t_req = predict_decode_marginal(self.model, &self.acc);
        let incr = st.decode_incr_blocks(self.engine.block_size());
        if self.phase == SchedPhase::Offline {
            if t_req > self.t {
                return TryOutcome::BudgetFail;
            }
            if (incr as i64) > self.phys.min(self.m) {
                return TryOutcome::MemFail;
            }
        }
        self.t -= t_req;
        if self.phase == SchedPhase::Online && self.t < 0.0 {
            self.online_overdraft = true;
        }
        self.charge_blocks(incr);
        self.acc.add_decode();
        self.entries
            .push(PlanEntry::decode(id, st.request.class, t_req, incr));
        TryOutcome::Scheduled
    }

    fn try_prefill_view(
        &mut self,
        id: RequestId,
        class: RequestClass,
        view: PrefillView,
        admission: Option<AdmissionInfo>,
    ) -> TryOutcome {
        if view.remaining_tokens == 0 {
            return TryOutcome::BudgetFail;
        }
        // In the online phase the latency budget is charged but never
        // denies admission: shrinking the budget must starve offline work,
        // not online serving.
        let gate_t = match self.phase {
            SchedPhase::Online => f64::INFINITY,
            SchedPhase::Offline => self.t,
        };
        let (l, t_req) = get_max_tokens(
            self.model,
            gate_t,
            self.c,
            self.mem_cap(),
            &view,
            &self.acc,
            self.engine.block_size(),
        );
        if l == 0 {
            // memory is the binding constraint iff not even one token's
            // blocks fit the memory budget
            let capacity =
                (view.blocks_held as u64 + self.mem_cap() as u64) * self.engine.block_size() as u64;
            let mem_bound = capacity.saturating_sub(view.kv_tokens) == 0;
            return if mem_bound && self.c > 0 {
                TryOutcome::MemFail
            } else {
                TryOutcome::BudgetFail
            };
        }
        let incr = get_num_blocks(view.kv_tokens + l as u64, self.engine.block_size())
            .saturating_sub(view.blocks_held);
        self.t -= t_req;
        if self.phase == SchedPhase::Online && self.t < 0.0 {
            self.online_overdraft = true;
        }
        self.c -= l;
        self.charge_blocks(incr);
        self.acc.add_prefill(l as u64);
        let mut entry = PlanEntry::prefill(id, class, l, t_req, incr);
        entry.admission = admission;
        self.entries.push(entry);
        TryOutcome::Scheduled
    }

    /// Continue prefilling a running request.
    pub fn try_prefill_running(&mut self, id: RequestId) -> TryOutcome {
        let st = self.engine.running(id).expect("running");
        let view = PrefillView {
            remaining_tokens: st.remaining_prefill(),
            kv_tokens: st.kv_tokens,
            blocks_held: st.blocks_held,
        };
        self.try_prefill_view(id, st.request.class, view, None)
    }

    fn overlay_credit(&self, path: &[(SegmentId, u32)]) -> (u32, Option<RequestId>) {
        let ids: Vec<SegmentId> = path.iter().map(|&(s, _)| s).collect();
        for k in (1..=ids.len()).rev() {
            if let Some(&owner) = self.overlay.get(&ids[..k]) {
                return (path[..k].iter().map(|&(_, t)| t).sum(), Some(owner));
            }
        }
        (0, None)
    }

    /// Cache credit a queued request would receive if admitted now, taking
    /// into account prefixes that admissions already planned in this batch
    /// will insert. `use_overlay: false` restricts to the committed cache
    /// (used during revalidation, where planned offline admissions may
    /// still be dropped).
    fn planned_credit(
        &self,
        request: &Request,
        target: u32,
        use_overlay: bool,
    ) -> (u32, Option<RequestId>) {
        let committed = self.engine.cache().credit_for(&request.prompt_path);
        let (overlaid, dep) = if use_overlay {
            self.overlay_credit(&request.prompt_path)
        } else {
            (0, None)
        };
        let (raw, dep) = if overlaid > committed {
            (overlaid, dep)
        } else {
            (committed, None)
        };
        (Engine::capped_credit(raw, target), dep)
    }

    /// Try to admit a queued request (fresh, preempted-with-progress, or a
    /// preserved decode request that only needs its blocks back).
    pub fn try_admit_queued(&mut self, q: &QueuedRequest) -> TryOutcome {
        self.try_admit_inner(q, true)
    }

    fn try_admit_inner(&mut self, q: &QueuedRequest, use_overlay: bool) -> TryOutcome {
        let id = q.request.id;
        debug_assert!(!self.claimed.contains(&id));
        match &q.progress {
            Some(p) if p.needs_realloc => {
                let blocks = get_num_blocks(p.kv_tokens, self.engine.block_size());
                let penalty = self.engine.config().readmit_penalty_ms;
                if (blocks as i64) > self.m.min(self.phys) {
                    return TryOutcome::MemFail;
                }
                if self.phase == SchedPhase::Offline && penalty > self.t {
                    return TryOutcome::BudgetFail;
                }
                self.t -= penalty;
                if self.phase == SchedPhase::Online && self.t < 0.0 {
                    self.online_overdraft = true;
                }
                self.charge_blocks(blocks);
                let mut entry = PlanEntry::readmit(id, q.request.class, penalty, blocks);
                entry.admission = Some(AdmissionInfo {
                    credit: 0,
                    credit_dep: None,
                });
                self.entries.push(entry);
                self.claimed.insert(id);
                TryOutcome::Scheduled
            }
            Some(p) if !p.recompute_credit => {
                let view = PrefillView {
                    remaining_tokens: p.prefill_target - p.prefilled_tokens,
                    kv_tokens: p.kv_tokens,
                    blocks_held: 0,
                };
                let admission = Some(AdmissionInfo {
                    credit: 0,
                    credit_dep: None,
                });
                let out = self.try_prefill_view(id, q.request.class, view, admission);
                if out == TryOutcome::Scheduled {
                    self.claimed.insert(id);
                }
                out
            }
            progress => {
                // fresh admission, or discard-mode re-admission which
                // recomputes its credit like a fresh request
                let target = progress
                    .as_ref()
                    .map(|p| p.prefill_target)
                    .unwrap_or(q.request.prompt_tokens);
                let (credit, dep) = self.planned_credit(&q.request, target, use_overlay);
                let view = PrefillView {
                    remaining_tokens: target - credit,
                    kv_tokens: credit as u64,
                    blocks_held: 0,
                };
                let admission = Some(AdmissionInfo {
                    credit,
                    credit_dep: dep,
                });
                let out = self.try_prefill_view(id, q.request.class, view, admission);
                if out == TryOutcome::Scheduled {
                    self.claimed.insert(id);
                    let ids: Vec<SegmentId> =
                        q.request.prompt_path.iter().map(|&(s, _)| s).collect();
                    for k in 1..=ids.len() {
                        self.overlay.entry(ids[..k].to_vec()).or_insert(id);
                    }
                }
                out
            }
        }
    }

    /// Preempt one lower-priority victim to make room for `admitting`.
    /// Victims are offline before online, youngest arrival first. Returns
    /// the victim, or `None` when no eligible victim remains.
    fn preempt_one(&mut self, admitting_priority: i32, victims: &[RequestId]) -> Option<RequestId> {
        let victim = victims
            .iter()
            .filter(|&&v| !self.preempted_set.contains(&v))
            .filter_map(|&v| self.engine.running(v).map(|st| (v, st)))
            .filter(|(_, st)| st.request.priority > admitting_priority)
            .max_by_key(|(v, st)| (st.request.priority, st.request.arrival_ms, *v));
        victim.map(|(v, st)| {
            self.release_blocks(st.blocks_held);
            self.preempted.push(v);
            self.preempted_set.insert(v);
            v
        })
    }

    /// Undo preemptions made for an admission attempt that then failed.
    fn rollback_preemptions(&mut self, victims: &[RequestId]) {
        for &v in victims.iter().rev() {
            let popped = self.preempted.pop();
            debug_assert_eq!(popped, Some(v));
            self.preempted_set.remove(&v);
            let blocks = self.engine.running(v).map(|st| st.blocks_held).unwrap_or(0);
            self.charge_blocks(blocks);
        }
    }

    fn into_plan(self) -> BatchPlan {
        BatchPlan {
            entries: self.entries,
            preemptions: self.preempted,
            residual_t: self.t,
            residual_c: self.c,
            residual_m: self.m.min(self.phys),
            online_overdraft: self.online_overdraft,
        }
    }
}

#[allow(clippy::large_enum_variant)]
enum OfflineQueue {
    Fcfs(VecDeque<QueuedRequest>),
    Psm(PsmQueue),
}

/// The two-phase scheduler: dual waiting queues, running lists, and the
/// single-slot lookahead mailbox.
pub struct Scheduler {
    cfg: SchedulerConfig,
    q_on: VecDeque<QueuedRequest>,
    q_off: OfflineQueue,
    r_on: Vec<RequestId>,
    r_off: Vec<RequestId>,
    pending: Option<BatchPlan>,
    psm_rng: ChaCha8Rng,
    /// Steps where online work alone overdrew the latency budget.
    pub online_overdraft_steps: u64,
    /// Online requests preempted as a last resort to keep decode memory
    /// growth feasible (should stay zero in sanely sized configs).
    pub emergency_online_preemptions: u64,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig, psm_seed: u64) -> Self {
        let q_off = match cfg.offline_policy {
            OfflinePolicy::Fcfs => OfflineQueue::Fcfs(VecDeque::new()),
            OfflinePolicy::Psm => OfflineQueue::Psm(PsmQueue::new()),
        };
        Scheduler {
            cfg,
            q_on: VecDeque::new(),
            q_off,
            r_on: Vec::new(),
            r_off: Vec::new(),
            pending: None,
            psm_rng: ChaCha8Rng::seed_from_u64(psm_seed),
            online_overdraft_steps: 0,
            emergency_online_preemptions: 0,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn set_latency_budget(&mut self, l_ms: f64) {
        self.cfg.latency_budget_ms = l_ms;
    }

    pub fn running_online(&self) -> &[RequestId] {
        &self.r_on
    }

    pub fn running_offline(&self) -> &[RequestId] {
        &self.r_off
    }

    pub fn queued_online(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.q_on.iter()
    }

    pub fn queued_offline_len(&self) -> usize {
        match &self.q_off {
            OfflineQueue::Fcfs(q) => q.len(),
            OfflineQueue::Psm(q) => q.len(),
        }
    }

    pub fn psm_queue(&self) -> Option<&PsmQueue> {
        match &self.q_off {
            OfflineQueue::Psm(q) => Some(q),
            OfflineQueue::Fcfs(_) => None,
        }
    }

    pub fn fcfs_offline_queue(&self) -> Option<&VecDeque<QueuedRequest>> {
        match &self.q_off {
            OfflineQueue::Fcfs(q) => Some(q),
            OfflineQueue::Psm(_) => None,
        }
    }

    /// Snapshot of the PSM RNG stream (the reference oracle replays draws
    /// from the same point).
    pub fn psm_rng_snapshot(&self) -> ChaCha8Rng {
        self.psm_rng.clone()
    }

    pub fn is_idle(&self) -> bool {
        self.q_on.is_empty()
            && self.queued_offline_len() == 0
            && self.r_on.is_empty()
            && self.r_off.is_empty()
    }

    pub fn has_waiting(&self) -> bool {
        !self.q_on.is_empty() || self.queued_offline_len() > 0
    }

    pub fn take_pending(&mut self) -> Option<BatchPlan> {
        self.pending.take()
    }

    pub fn store_pending(&mut self, plan: BatchPlan) {
        self.pending = Some(plan);
    }

    /// Enqueue a newly arrived request.
    pub fn enqueue(&mut self, request: Request) {
        let q = QueuedRequest {
            request,
            progress: None,
        };
        match q.request.class {
            RequestClass::Online => self.q_on.push_back(q),
            RequestClass::Offline => match &mut self.q_off {
                OfflineQueue::Fcfs(queue) => queue.push_back(q),
                OfflineQueue::Psm(queue) => queue.insert(q).expect("fresh arrival ids are unique"),
            },
        }
    }

    fn requeue_front(&mut self, q: QueuedRequest) {
        match q.request.class {
            RequestClass::Online => self.q_on.push_front(q),
            RequestClass::Offline => match &mut self.q_off {
                OfflineQueue::Fcfs(queue) => queue.push_front(q),
                OfflineQueue::Psm(queue) => {
                    queue.insert(q).expect("preempted request left the queue")
                }
            },
        }
    }

    /// Compute the plan for the next step from the current state. Nothing
    /// is mutated except the PSM selection RNG.
    pub fn plan_step(&mut self, engine: &Engine, model: &PredictorModel) -> BatchPlan {
        let offline_held: i64 = self
            .r_off
            .iter()
            .filter_map(|&id| engine.running(id))
            .map(|st| st.blocks_held as i64)
            .sum();
        // The overdraft line is the reserve, capped by what preempting
        // offline work can actually reclaim.
        let pad = (self.cfg.offline_reserve_blocks as i64).min(offline_held);
        let phys = engine.blocks_free() as i64;
        let t0 = self.cfg.latency_budget_ms - predict(model, &BatchFeatures::zero());
        let mut ctx = PlanCtx::new(engine, model, t0, self.cfg.chunk_tokens, phys + pad, phys);

        // --- phase one: online ---
        ctx.phase = SchedPhase::Online;
        let r_on = self.r_on.clone();
        for &id in &r_on {
            if let Some(st) = engine.running(id) {
                if st.phase == Phase::Decode && !st.needs_realloc {
                    ctx.try_decode(id);
                }
            }
        }
        let r_off_snapshot = self.r_off.clone();
        'prefill: for item in PrefillPass::new(&r_on, &self.q_on, engine) {
            let mut attempt_victims: Vec<RequestId> = Vec::new();
            loop {
                let outcome = match item {
                    PrefillItem::Running(id) => ctx.try_prefill_running(id),
                    PrefillItem::Queued(q) => ctx.try_admit_queued(q),
                };
                match outcome {
                    TryOutcome::Scheduled => break,
                    TryOutcome::MemFail => {
                        let priority = match item {
                            PrefillItem::Running(id) => {
                                engine.running(id).map(|s| s.request.priority).unwrap_or(0)
                            }
                            PrefillItem::Queued(q) => q.request.priority,
                        };
                        match ctx.preempt_one(priority, &r_off_snapshot) {
                            // retry the same request with the freed memory
                            Some(v) => attempt_victims.push(v),
                            None => {
                                ctx.rollback_preemptions(&attempt_victims);
                                break 'prefill;
                            }
                        }
                    }
                    TryOutcome::BudgetFail => {
                        ctx.rollback_preemptions(&attempt_victims);
                        break 'prefill;
                    }
                }
            }
        }
        if ctx.online_overdraft {
            self.online_overdraft_steps += 1;
        }

        // --- repair: preempt offline until the plan is physically feasible
        // (the reserve check: budget memory below the reserve means free
        // memory was overdrawn) ---
        while ctx.phys < 0 {
            if ctx.preempt_one(i32::MIN, &r_off_snapshot).is_some() {
                continue;
            }
            // last resort: drop the youngest online request's entries and
            // preempt it
            let victim = r_on
                .iter()
                .filter(|&&v| !ctx.preempted_set.contains(&v))
                .filter_map(|&v| engine.running(v).map(|st| (v, st)))
                .max_by_key(|(v, st)| (st.request.arrival_ms, *v))
                .map(|(v, _)| v);
            match victim {
                Some(v) => {
                    let removed: Vec<PlanEntry> = ctx
                        .entries
                        .iter()
                        .filter(|e| e.request == v)
                        .cloned()
                        .collect();
                    ctx.entries.retain(|e| e.request != v);
                    for e in &removed {
                        ctx.c += e.prefill_tokens;
                        ctx.release_blocks(e.incr_blocks);
                        let before = predict(ctx.model, &ctx.acc);
                        match e.kind {
                            PlanEntryKind::Prefill => ctx.acc.remove_prefill(e.prefill_tokens as u64),
                            PlanEntryKind::Decode => ctx.acc.remove_decode(),
                            PlanEntryKind::Readmit => {}
                        }
                        match e.kind {
                            PlanEntryKind::Readmit => ctx.t += e.predicted_ms,
                            _ => ctx.t += before - predict(ctx.model, &ctx.acc),
                        }
                    }
                    let st = engine.running(v).expect("running");
                    ctx.release_blocks(st.blocks_held);
                    ctx.preempted.push(v);
                    ctx.preempted_set.insert(v);
                    self.emergency_online_preemptions += 1;
                }
                None => break,
            }
        }

        // --- phase two: offline, within what remains ---
        ctx.m = ctx.phys;
        ctx.phase = SchedPhase::Offline;
        let r_off = self.r_off.clone();
        match &mut self.q_off {
            OfflineQueue::Psm(queue) => {
                psm_offline_schedule(
                    &mut ctx,
                    &r_off,
                    queue,
                    self.cfg.psm_utility,
                    &mut self.psm_rng,
                );
            }
            OfflineQueue::Fcfs(queue) => {
                for &id in &r_off {
                    if ctx.is_preempted(id) {
                        continue;
                    }
                    if let Some(st) = engine.running(id) {
                        if st.phase == Phase::Decode && !st.needs_realloc {
                            ctx.try_decode(id);
                        }
                    }
                }
                'off: for item in PrefillPass::new(&r_off, &*queue, engine) {
                    let outcome = match item {
                        PrefillItem::Running(id) => {
                            if ctx.is_preempted(id) {
                                continue 'off;
                            }
                            ctx.try_prefill_running(id)
                        }
                        PrefillItem::Queued(q) => ctx.try_admit_queued(q),
                    };
                    if outcome != TryOutcome::Scheduled {
                        break 'off;
                    }
                }
            }
        }

        ctx.into_plan()
    }

    /// Fold newly arrived online requests into a precomputed plan by
    /// consuming its residual budgets; when they do not suffice, planned
    /// offline entries are dropped (largest predicted latency first, with
    /// any admissions whose cache credit depended on a dropped admission
    /// cascading out) until the arrival fits.
    pub fn on_arrival_revalidate(
        &mut self,
        plan: BatchPlan,
        new_online: &[RequestId],
        engine: &Engine,
        model: &PredictorModel,
    ) -> BatchPlan {
        if new_online.is_empty() {
            return plan;
        }
        let mut ctx = PlanCtx::new(
            engine,
            model,
            plan.residual_t,
            plan.residual_c,
            plan.residual_m,
            plan.residual_m,
        );
        ctx.phase = SchedPhase::Online;
        ctx.online_overdraft = plan.online_overdraft;
        ctx.preempted = plan.preemptions;
        ctx.preempted_set = ctx.preempted.iter().copied().collect();
        ctx.entries = plan.entries;
        for e in &ctx.entries {
            match e.kind {
                PlanEntryKind::Prefill => ctx.acc.add_prefill(e.prefill_tokens as u64),
                PlanEntryKind::Decode => ctx.acc.add_decode(),
                PlanEntryKind::Readmit => {}
            }
            if e.admission.is_some() {
                ctx.claimed.insert(e.request);
            }
        }

        'arrivals: for &id in new_online {
            let Some(q) = self.q_on.iter().find(|q| q.request.id == id) else {
                continue;
            };
            let q = q.clone();
            loop {
                // New arrivals take credit from the committed cache only:
                // same-plan offline insertions may still be dropped.
                let outcome = ctx.try_admit_inner(&q, false);
                match outcome {
                    TryOutcome::Scheduled => break,
                    // chunk or memory bound: reclaim from planned offline
                    // entries, largest planned latency first
                    TryOutcome::MemFail | TryOutcome::BudgetFail => {
                        match largest_offline_entry(&ctx) {
                            Some(i) => drop_entry_cascade(&mut ctx, i),
                            None => break 'arrivals,
                        }
                    }
                }
            }
            // the admission may have overdrawn the latency budget; shed
            // offline work until the budget is whole again
            while ctx.t < 0.0 {
                match largest_offline_entry(&ctx) {
                    Some(i) => drop_entry_cascade(&mut ctx, i),
                    None => break,
                }
            }
        }
        ctx.into_plan()
    }

    /// Apply a plan's preemptions and admissions to the real state. Call
    /// immediately before executing the plan's entries on the engine.
    pub fn commit(&mut self, plan: &BatchPlan, engine: &mut Engine) -> Result<Vec<Request>, EngineError> {
        let mut preempted_requests = Vec::new();
        for &victim in &plan.preemptions {
            let (request, progress, _freed) = engine.preempt(victim, self.cfg.preemption_mode)?;
            self.r_on.retain(|&id| id != victim);
            self.r_off.retain(|&id| id != victim);
            preempted_requests.push(request.clone());
            self.requeue_front(QueuedRequest {
                request,
                progress: Some(progress),
            });
        }
        for e in &plan.entries {
            if let Some(adm) = &e.admission {
                let q = self.dequeue_exact(e.request).ok_or_else(|| {
                    EngineError::Contract(format!("planned admission {} missing from queue", e.request))
                })?;
                engine.admit(q.request.clone(), adm.credit, q.progress)?;
                match q.request.class {
                    RequestClass::Online => self.r_on.push(e.request),
                    RequestClass::Offline => self.r_off.push(e.request),
                }
            }
        }
        Ok(preempted_requests)
    }

    fn dequeue_exact(&mut self, id: RequestId) -> Option<QueuedRequest> {
        if let Some(pos) = self.q_on.iter().position(|q| q.request.id == id) {
            return self.q_on.remove(pos);
        }
        match &mut self.q_off {
            OfflineQueue::Fcfs(queue) => {
                let pos = queue.iter().position(|q| q.request.id == id)?;
                queue.remove(pos)
            }
            OfflineQueue::Psm(queue) => queue.remove(id).ok(),
        }
    }

    /// Drop completed requests from the running lists.
    pub fn apply_step_result(&mut self, completed: &[RequestId]) {
        self.r_on.retain(|id| !completed.contains(id));
        self.r_off.retain(|id| !completed.contains(id));
    }
}

fn largest_offline_entry(ctx: &PlanCtx<'_>) -> Option<usize> {
    ctx.entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.class == RequestClass::Offline)
        .max_by(|(i, a), (j, b)| {
            a.predicted_ms
                .partial_cmp(&b.predicted_ms)
                .unwrap()
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
}

fn drop_entry_cascade(ctx: &mut PlanCtx<'_>, idx: usize) {
    let entry = ctx.entries.remove(idx);
    ctx.c += entry.prefill_tokens;
    ctx.release_blocks(entry.incr_blocks);
    // Restore the exact feature-level delta of removing this entry now,
    // not the marginal recorded when it was planned: with a nonconvex
    // fitted model (e.g. a noise-driven negative decode-square weight) the
    // stale marginal can exceed the true reduction and quietly overdraw
    // the budget.
    let before = predict(ctx.model, &ctx.acc);
    match entry.kind {
        PlanEntryKind::Prefill => ctx.acc.remove_prefill(entry.prefill_tokens as u64),
        PlanEntryKind::Decode => ctx.acc.remove_decode(),
        PlanEntryKind::Readmit => {}
    }
    match entry.kind {
        PlanEntryKind::Readmit => ctx.t += entry.predicted_ms,
        _ => ctx.t += before - predict(ctx.model, &ctx.acc),
    }
    if entry.admission.is_some() {
        ctx.claimed.remove(&entry.request);
        ctx.overlay.retain(|_, owner| *owner != entry.request);
        // admissions whose credit relied on this one must go too
        loop {
            let dependent = ctx.entries.iter().position(|e| {
                e.admission
                    .as_ref()
                    .is_some_and(|a| a.credit_dep == Some(entry.request))
            });
            match dependent {
                Some(i) => drop_entry_cascade(ctx, i),
                None => break,
            }
        }
    }
}

#[derive(Clone, Copy)]
enum PrefillItem<'a> {
    Running(RequestId),
    Queued(&'a QueuedRequest),
}

/// Iterator over the prefill pass: running requests still prefilling, in
/// retained order, followed by the waiting queue in policy order.
struct PrefillPass<'a> {
    running: std::vec::IntoIter<RequestId>,
    queued: std::collections::vec_deque::Iter<'a, QueuedRequest>,
}

impl<'a> PrefillPass<'a> {
    fn new(running: &[RequestId], queue: &'a VecDeque<QueuedRequest>, engine: &Engine) -> Self {
        let prefilling: Vec<RequestId> = running
            .iter()
            .copied()
            .filter(|&id| {
                engine
                    .running(id)
                    .map(|st| st.phase == Phase::Prefill && !st.needs_realloc)
                    .unwrap_or(false)
            })
            .collect();
        PrefillPass {
            running: prefilling.into_iter(),
            queued: queue.iter(),
        }
    }
}

impl<'a> Iterator for PrefillPass<'a> {
    type Item = PrefillItem<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(id) = self.running.next() {
            return Some(PrefillItem::Running(id));
        }
        self.queued.next().map(PrefillItem::Queued)
    }
}
