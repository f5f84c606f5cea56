//! Deterministic simulation of a single inference engine instance.
//!
//! The engine executes batch plans handed to it by the scheduler: it
//! advances a millisecond clock by the ground-truth latency of each batch,
//! tracks per-request prefill/decode progress, accounts KV cache memory in
//! fixed-size blocks, and credits prefix-cache hits. It performs no policy:
//! infeasible plans are contract violations, not recoverable conditions.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventKind};
use crate::predictor::{featurize, BatchFeatures};
use crate::workload::{Request, RequestClass, RequestId, SegmentId};

/// Ground-truth batch latency model.
///
/// Latency of a batch with features `f` is
/// `(c0 + (c1*S_p + c2*S_d + c3*S_p^2 + c3b*S_d^2 + c4*N_p + c5*N_d +
/// c_cross*S_p*S_d) / parallel_scale) * (1 + eps)`
/// with `eps ~ Normal(0, noise_pct)`. The cross term and the decode square
/// sit outside the predictor's default feature family, giving a knob for
/// controlled model misspecification; `parallel_scale` stands in for
/// tensor/pipeline-parallel speedup on the compute terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    #[serde(default)]
    pub c3b: f64,
    pub c4: f64,
    pub c5: f64,
    #[serde(default)]
    pub c_cross: f64,
    #[serde(default)]
    pub noise_pct: f64,
    #[serde(default = "default_scale")]
    pub parallel_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    1.0
}

impl HardwareModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let coefs = [self.c0, self.c1, self.c2, self.c3, self.c3b, self.c4, self.c5];
        if coefs.iter().any(|c| *c < 0.0) {
            return Err(EngineError::Contract("hardware coefficients must be >= 0".into()));
        }
        if self.noise_pct < 0.0 {
            return Err(EngineError::Contract("noise_pct must be >= 0".into()));
        }
        if self.parallel_scale <= 0.0 {
            return Err(EngineError::Contract("parallel_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Steps never take zero time, so the clock strictly increases.
const MIN_STEP_MS: f64 = 1e-6;

/// Ground-truth latency of a batch. One noise value is drawn per call,
/// so the sequence is deterministic for a fixed RNG seed.
pub fn true_batch_latency(hw: &HardwareModel, f: &BatchFeatures, rng: &mut ChaCha8Rng) -> f64 {
    let compute = hw.c1 * f.s_p
        + hw.c2 * f.s_d
        + hw.c3 * f.s_p2
        + hw.c3b * f.s_d2
        + hw.c4 * f.n_p
        + hw.c5 * f.n_d
        + hw.c_cross * f.s_p * f.s_d;
    let base = hw.c0 + compute / hw.parallel_scale;
    let eps: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng) * hw.noise_pct;
    (base * (1.0 + eps).max(0.05)).max(MIN_STEP_MS)
}

/// Blocks needed to hold `l` tokens: `ceil(l / block_size)`.
pub fn get_num_blocks(l: u64, block_size: u32) -> u32 {
    (l.div_ceil(block_size as u64)) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub kv_blocks: u32,
    pub block_size: u32,
    /// Prefix-cache capacity in path-prefix entries (LRU eviction).
    pub prefix_cache_entries: usize,
    /// Latency charged when a state-preserved decode request re-allocates
    /// its blocks after preemption (a proxy for swap-in cost).
    pub readmit_penalty_ms: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            kv_blocks: 2048,
            block_size: 16,
            prefix_cache_entries: 64,
            readmit_penalty_ms: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("request {0} is not running")]
    UnknownRequest(RequestId),
    #[error("request {0} is already running")]
    DuplicateAdmit(RequestId),
    #[error("out of KV blocks: need {need}, free {free}")]
    OutOfBlocks { need: u32, free: u32 },
    #[error("scheduler contract violated: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Execution state of one running request.
#[derive(Debug, Clone)]
pub struct RunningRequest {
    pub request: Request,
    pub phase: Phase,
    /// Prompt tokens whose KV is accounted for, including cache-credited
    /// tokens that were never computed.
    pub prefilled_tokens: u32,
    /// Tokens that must be prefilled before decode; equals the prompt
    /// length except after a discard-mode preemption, which folds already
    /// emitted tokens into the recompute target.
    pub prefill_target: u32,
    pub decoded_tokens: u32,
    /// Tokens whose KV occupies blocks right now.
    pub kv_tokens: u64,
    pub blocks_held: u32,
    pub first_token_ms: Option<f64>,
    /// Cache credit granted at admission (for accounting/reporting).
    pub credit_tokens: u32,
    /// Preserved decode request waiting for its blocks to be re-allocated.
    pub needs_realloc: bool,
}

impl RunningRequest {
    pub fn remaining_prefill(&self) -> u32 {
        self.prefill_target - self.prefilled_tokens
    }

    /// Blocks this request would additionally need to decode one token.
    pub fn decode_incr_blocks(&self, block_size: u32) -> u32 {
        get_num_blocks(self.kv_tokens + 1, block_size).saturating_sub(self.blocks_held)
    }
}

/// Progress snapshot carried by a preempted request back into its queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SavedProgress {
    pub prefilled_tokens: u32,
    pub prefill_target: u32,
    pub decoded_tokens: u32,
    pub kv_tokens: u64,
    pub first_token_ms: Option<f64>,
    /// Decode-phase victim in preserve mode: must re-allocate blocks but
    /// redoes no prefill compute.
    pub needs_realloc: bool,
    /// Discard mode: progress was dropped; admission recomputes the cache
    /// credit like a fresh request.
    pub recompute_credit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreemptionMode {
    Preserve,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanEntryKind {
    Prefill,
    Decode,
    /// Re-allocate blocks for a preserved decode request; no compute.
    Readmit,
}

/// One scheduled request in a batch plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub request: RequestId,
    pub class: RequestClass,
    pub kind: PlanEntryKind,
    /// Prefill tokens this iteration (0 for decode/readmit entries).
    pub prefill_tokens: u32,
    /// Predicted marginal latency charged against the budget.
    pub predicted_ms: f64,
    /// Blocks charged against the memory budget for this entry.
    pub incr_blocks: u32,
    /// Present when this entry admits a request from a queue.
    pub admission: Option<AdmissionInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionInfo {
    /// Cache credit assumed at planning time (capped so at least one
    /// prompt token is always computed).
    pub credit: u32,
    /// Same-plan admission whose cache insertion this credit relies on;
    /// if that admission is dropped, this one must be dropped too.
    pub credit_dep: Option<RequestId>,
}

impl PlanEntry {
    pub fn prefill(request: RequestId, class: RequestClass, tokens: u32, predicted_ms: f64, incr_blocks: u32) -> Self {
        PlanEntry {
            request,
            class,
            kind: PlanEntryKind::Prefill,
            prefill_tokens: tokens,
            predicted_ms,
            incr_blocks,
            admission: None,
        }
    }

    pub fn decode(request: RequestId, class: RequestClass, predicted_ms: f64, incr_blocks: u32) -> Self {
        PlanEntry {
            request,
            class,
            kind: PlanEntryKind::Decode,
            prefill_tokens: 0,
            predicted_ms,
            incr_blocks,
            admission: None,
        }
    }

    pub fn readmit(request: RequestId, class: RequestClass, penalty_ms: f64, blocks: u32) -> Self {
        PlanEntry {
            request,
            class,
            kind: PlanEntryKind::Readmit,
            prefill_tokens: 0,
            predicted_ms: penalty_ms,
            incr_blocks: blocks,
            admission: None,
        }
    }
}

/// A scheduling decision for one engine step, plus the state changes
/// (preemptions, admissions) it assumes. Plans are speculative until
/// committed: computing one mutates nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPlan {
    pub entries: Vec<PlanEntry>,
    /// Victims preempted before this plan executes, in order.
    pub preemptions: Vec<RequestId>,
    /// Budgets left over after planning, consumed by arrival revalidation.
    pub residual_t: f64,
    pub residual_c: u32,
    pub residual_m: i64,
    /// Online work alone exceeded the latency budget this step.
    pub online_overdraft: bool,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.preemptions.is_empty()
    }

    pub fn features(&self) -> BatchFeatures {
        featurize(&self.entries)
    }
}

/// LRU set of prompt-path prefixes with cached KV.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    entries: HashMap<Vec<SegmentId>, u64>,
    capacity: usize,
    tick: u64,
}

impl PrefixCache {
    fn new(capacity: usize) -> Self {
        PrefixCache {
            entries: HashMap::new(),
            capacity,
            tick: 0,
        }
    }

    /// Token credit of the longest cached prefix of `path`.
    pub fn credit_for(&self, path: &[(SegmentId, u32)]) -> u32 {
        let ids: Vec<SegmentId> = path.iter().map(|&(s, _)| s).collect();
        for k in (1..=ids.len()).rev() {
            if self.entries.contains_key(&ids[..k]) {
                return path[..k].iter().map(|&(_, t)| t).sum();
            }
        }
        0
    }

    /// Insert all prefixes of `path`. Eviction is deferred: admissions
    /// committed within one step must not evict prefixes that later
    /// admissions of the same plan were credited against.
    fn insert_path(&mut self, path: &[(SegmentId, u32)]) {
        if self.capacity == 0 {
            return;
        }
        let ids: Vec<SegmentId> = path.iter().map(|&(s, _)| s).collect();
        for k in 1..=ids.len() {
            self.tick += 1;
            self.entries.insert(ids[..k].to_vec(), self.tick);
        }
    }

    /// Evict least-recently-inserted entries down to capacity.
    fn enforce_capacity(&mut self) {
        while self.entries.len() > self.capacity {
            // unique ticks make the LRU victim deterministic
            let victim = self
                .entries
                .iter()
                .min_by_key(|(_, &t)| t)
                .map(|(k, _)| k.clone())
                .expect("nonempty");
            self.entries.remove(&victim);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of executing one batch plan.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub step_index: u64,
    pub start_ms: f64,
    pub end_ms: f64,
    pub latency_ms: f64,
    pub features: BatchFeatures,
    pub events: Vec<Event>,
    pub completed: Vec<RequestId>,
    pub entered_decode: Vec<RequestId>,
}

/// The simulated engine instance.
pub struct Engine {
    cfg: EngineConfig,
    hw: HardwareModel,
    rng: ChaCha8Rng,
    clock_ms: f64,
    blocks_free: u32,
    // keyed lookups only; never iterated in an order-sensitive way
    running: HashMap<RequestId, RunningRequest>,
    cache: PrefixCache,
    step_index: u64,
    /// Total prefill tokens skipped thanks to prefix-cache credits.
    pub prefill_tokens_saved: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, hw: HardwareModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(hw.seed);
        Engine {
            blocks_free: cfg.kv_blocks,
            cache: PrefixCache::new(cfg.prefix_cache_entries),
            cfg,
            hw,
            rng,
            clock_ms: 0.0,
            running: HashMap::new(),
            step_index: 0,
            prefill_tokens_saved: 0,
        }
    }

    pub fn clock_ms(&self) -> f64 {
        self.clock_ms
    }

    pub fn blocks_free(&self) -> u32 {
        self.blocks_free
    }

    pub fn block_size(&self) -> u32 {
        self.cfg.block_size
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn running(&self, id: RequestId) -> Option<&RunningRequest> {
        self.running.get(&id)
    }

    pub fn num_running(&self) -> usize {
        self.running.len()
    }

    pub fn cache(&self) -> &PrefixCache {
        &self.cache
    }

    /// Advance the clock without work (idle until the next arrival).
    pub fn fast_forward(&mut self, to_ms: f64) {
        if to_ms > self.clock_ms {
            self.clock_ms = to_ms;
        }
    }

    /// Raw prefix-cache credit for a not-yet-prefilled request: tokens of
    /// the longest cached prefix of its prompt path. A full-path hit
    /// returns the whole prompt length; admission caps the applied credit
    /// so at least one token is always computed.
    pub fn prefix_cache_credit(&self, r: &Request) -> u32 {
        self.cache.credit_for(&r.prompt_path)
    }

    /// Credit applied at admission for a request whose prefill target is
    /// `target` tokens.
    pub fn capped_credit(raw: u32, target: u32) -> u32 {
        raw.min(target.saturating_sub(1))
    }

    /// Move a request from a queue into the running set.
    ///
    /// `expected_credit` is what the scheduler assumed when sizing the
    /// first chunk; a mismatch means planner and engine disagree about
    /// cache state and is a contract violation. Credited tokens skip
    /// prefill compute but still consume KV blocks once chunks execute.
    pub fn admit(
        &mut self,
        request: Request,
        expected_credit: u32,
        progress: Option<SavedProgress>,
    ) -> Result<(), EngineError> {
        let id = request.id;
        if self.running.contains_key(&id) {
            return Err(EngineError::DuplicateAdmit(id));
        }
        let state = match progress {
            None => {
                let raw = self.cache.credit_for(&request.prompt_path);
                let grantable = Self::capped_credit(raw, request.prompt_tokens);
                // the scheduler may deliberately claim less credit than the
                // cache offers (e.g. arrivals planned before this batch's
                // insertions), never more
                if expected_credit > grantable {
                    return Err(EngineError::Contract(format!(
                        "request {id}: planned credit {expected_credit} but cache grants {grantable}"
                    )));
                }
                let credit = expected_credit;
                self.cache.insert_path(&request.prompt_path);
                self.prefill_tokens_saved += credit as u64;
                RunningRequest {
                    prefill_target: request.prompt_tokens,
                    prefilled_tokens: credit,
                    decoded_tokens: 0,
                    kv_tokens: credit as u64,
                    blocks_held: 0,
                    phase: Phase::Prefill,
                    first_token_ms: None,
                    credit_tokens: credit,
                    needs_realloc: false,
                    request,
                }
            }
            Some(p) if p.recompute_credit => {
                let raw = self.cache.credit_for(&request.prompt_path);
                let grantable = Self::capped_credit(raw, p.prefill_target);
                if expected_credit > grantable {
                    return Err(EngineError::Contract(format!(
                        "request {id}: planned credit {expected_credit} but cache grants {grantable}"
                    )));
                }
                let credit = expected_credit;
                self.cache.insert_path(&request.prompt_path);
                self.prefill_tokens_saved += credit as u64;
                RunningRequest {
                    prefill_target: p.prefill_target,
                    prefilled_tokens: credit,
                    decoded_tokens: p.decoded_tokens,
                    kv_tokens: credit as u64,
                    blocks_held: 0,
                    phase: Phase::Prefill,
                    first_token_ms: p.first_token_ms,
                    credit_tokens: credit,
                    needs_realloc: false,
                    request,
                }
            }
            Some(p) => RunningRequest {
                prefill_target: p.prefill_target,
                prefilled_tokens: p.prefilled_tokens,
                decoded_tokens: p.decoded_tokens,
                kv_tokens: p.kv_tokens,
                blocks_held: 0,
                phase: if p.prefilled_tokens < p.prefill_target {
                    Phase::Prefill
                } else {
                    Phase::Decode
                },
                first_token_ms: p.first_token_ms,
                credit_tokens: 0,
                needs_realloc: p.needs_realloc,
                request,
            },
        };
        self.running.insert(id, state);
        Ok(())
    }

    /// Evict a running request, releasing its blocks. Returns the request,
    /// the progress snapshot to carry back into the queue, and the number
    /// of freed blocks.
    pub fn preempt(
        &mut self,
        id: RequestId,
        mode: PreemptionMode,
    ) -> Result<(Request, SavedProgress, u32), EngineError> {
        let st = self
            .running
            .remove(&id)
            .ok_or(EngineError::UnknownRequest(id))?;
        let freed = st.blocks_held;
        self.blocks_free += freed;
        let progress = match mode {
            PreemptionMode::Preserve => SavedProgress {
                prefilled_tokens: st.prefilled_tokens,
                prefill_target: st.prefill_target,
                decoded_tokens: st.decoded_tokens,
                kv_tokens: st.kv_tokens,
                first_token_ms: st.first_token_ms,
                needs_realloc: st.phase == Phase::Decode,
                recompute_credit: false,
            },
            PreemptionMode::Discard => SavedProgress {
                prefilled_tokens: 0,
                prefill_target: st.request.prompt_tokens + st.decoded_tokens,
                decoded_tokens: st.decoded_tokens,
                kv_tokens: 0,
                first_token_ms: st.first_token_ms,
                needs_realloc: false,
                recompute_credit: true,
            },
        };
        Ok((st.request, progress, freed))
    }

    fn allocate(&mut self, need: u32) -> Result<(), EngineError> {
        if need > self.blocks_free {
            return Err(EngineError::OutOfBlocks {
                need,
                free: self.blocks_free,
            });
        }
        self.blocks_free -= need;
        Ok(())
    }

    /// Execute one batch plan's entries and advance the clock.
    pub fn step(&mut self, entries: &[PlanEntry]) -> Result<StepResult, EngineError> {
        if entries.is_empty() {
            return Err(EngineError::Contract("empty step".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in entries {
            if !seen.insert(e.request) {
                return Err(EngineError::Contract(format!(
                    "request {} appears twice in one plan",
                    e.request
                )));
            }
            let st = self
                .running
                .get(&e.request)
                .ok_or(EngineError::UnknownRequest(e.request))?;
            match e.kind {
                PlanEntryKind::Prefill => {
                    if st.phase != Phase::Prefill || st.needs_realloc {
                        return Err(EngineError::Contract(format!(
                            "request {} is not prefilling",
                            e.request
                        )));
                    }
                    if e.prefill_tokens == 0 || e.prefill_tokens > st.remaining_prefill() {
                        return Err(EngineError::Contract(format!(
                            "request {}: chunk {} out of range (remaining {})",
                            e.request,
                            e.prefill_tokens,
                            st.remaining_prefill()
                        )));
                    }
                }
                PlanEntryKind::Decode => {
                    if st.phase != Phase::Decode || st.needs_realloc {
                        return Err(EngineError::Contract(format!(
                            "request {} is not decodable",
                            e.request
                        )));
                    }
                }
                PlanEntryKind::Readmit => {
                    if !st.needs_realloc {
                        return Err(EngineError::Contract(format!(
                            "request {} does not need re-allocation",
                            e.request
                        )));
                    }
                }
            }
        }

        let features = featurize(entries);
        let mut latency = true_batch_latency(&self.hw, &features, &mut self.rng);
        for e in entries {
            if e.kind == PlanEntryKind::Readmit {
                latency += self.cfg.readmit_penalty_ms;
            }
        }
        let start = self.clock_ms;
        let end = start + latency;
        self.clock_ms = end;
        self.step_index += 1;

        let mut events = Vec::new();
        let mut completed = Vec::new();
        let mut entered_decode = Vec::new();
        for e in entries {
            let id = e.request;
            match e.kind {
                PlanEntryKind::Prefill => {
                    let st = self.running.get(&id).unwrap();
                    let kv_after = st.kv_tokens + e.prefill_tokens as u64;
                    let need =
                        get_num_blocks(kv_after, self.cfg.block_size).saturating_sub(st.blocks_held);
                    self.allocate(need)?;
                    let st = self.running.get_mut(&id).unwrap();
                    st.blocks_held += need;
                    st.kv_tokens = kv_after;
                    st.prefilled_tokens += e.prefill_tokens;
                    if st.prefilled_tokens == st.prefill_target {
                        // prefill complete: the final forward pass yields
                        // one output token
                        st.phase = Phase::Decode;
                        st.decoded_tokens += 1;
                        let kind = if st.decoded_tokens == 1 {
                            st.first_token_ms = Some(end);
                            EventKind::FirstToken
                        } else {
                            EventKind::Token
                        };
                        events.push(Event {
                            t_ms: end,
                            kind,
                            request: id,
                            class: st.request.class,
                        });
                        entered_decode.push(id);
                        if st.decoded_tokens == st.request.output_tokens {
                            self.complete(id, end, &mut events, &mut completed);
                        }
                    }
                }
                PlanEntryKind::Decode => {
                    let st = self.running.get(&id).unwrap();
                    // processing the previous output token grows the KV
                    let kv_after = st.kv_tokens + 1;
                    let need =
                        get_num_blocks(kv_after, self.cfg.block_size).saturating_sub(st.blocks_held);
                    self.allocate(need)?;
                    let st = self.running.get_mut(&id).unwrap();
                    st.blocks_held += need;
                    st.kv_tokens = kv_after;
                    st.decoded_tokens += 1;
                    events.push(Event {
                        t_ms: end,
                        kind: EventKind::Token,
                        request: id,
                        class: st.request.class,
                    });
                    if st.decoded_tokens == st.request.output_tokens {
                        self.complete(id, end, &mut events, &mut completed);
                    }
                }
                PlanEntryKind::Readmit => {
                    let st = self.running.get(&id).unwrap();
                    let need = get_num_blocks(st.kv_tokens, self.cfg.block_size);
                    self.allocate(need)?;
                    let st = self.running.get_mut(&id).unwrap();
                    st.blocks_held = need;
                    st.needs_realloc = false;
                }
            }
        }

        self.cache.enforce_capacity();
        debug_assert!(self.check_block_conservation());
        Ok(StepResult {
            step_index: self.step_index,
            start_ms: start,
            end_ms: end,
            latency_ms: latency,
            features,
            events,
            completed,
            entered_decode,
        })
    }

    fn complete(
        &mut self,
        id: RequestId,
        t_ms: f64,
        events: &mut Vec<Event>,
        completed: &mut Vec<RequestId>,
    ) {
        let st = self.running.remove(&id).expect("running");
        self.blocks_free += st.blocks_held;
        events.push(Event {
            t_ms,
            kind: EventKind::Complete,
            request: id,
            class: st.request.class,
        });
        completed.push(id);
    }

    /// Block conservation: free + held == total.
    pub fn check_block_conservation(&self) -> bool {
        let held: u64 = self.running.values().map(|r| r.blocks_held as u64).sum();
        held + self.blocks_free as u64 == self.cfg.kv_blocks as u64
    }
}
