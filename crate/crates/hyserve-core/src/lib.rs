//! Deterministic simulation and scheduling for hybrid LLM serving.
//!
//! An inference instance serves two request classes at once: latency-sensitive
//! online requests and throughput-oriented offline requests. The scheduler
//! admits offline work only into the capacity left over after online requests
//! are served, using a learned batch-latency predictor and a profiled
//! per-iteration latency budget to keep online latency SLOs intact.
//!
//! The crate is organized around the serving pipeline:
//!
//! - [`workload`]: trace ingestion and synthetic workload generators.
//! - [`engine`]: discrete-event simulation of one inference engine (clock,
//!   KV block memory, chunked prefill, prefix-cache reuse) driven by a
//!   parametric ground-truth cost model.
//! - [`predictor`]: the linear batch-latency predictor, its profiling and
//!   fitting pipeline, and the max-tokens solver used during scheduling.
//! - [`scheduler`]: two-phase SLO-aware scheduling with priority preemption
//!   and the asynchronous lookahead/revalidation workflow.
//! - [`psm`]: prefix-sharing-maximizing order for the offline queue, with a
//!   freshness-based fairness extension.
//! - [`profiler`]: SLO-aware binary search for the largest compliant
//!   latency budget.
//! - [`metrics`]: TTFT/TBT/throughput metrics computed from event logs.
//! - [`sim`]: the experiment runner tying scheduler and engine together.
//!
//! Everything is deterministic: all randomness flows through explicitly
//! seeded ChaCha streams, so identical configs reproduce event logs
//! byte-for-byte.

pub mod config;
pub mod engine;
pub mod events;
pub mod metrics;
pub mod predictor;
pub mod profiler;
pub mod psm;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use engine::{BatchPlan, Engine, EngineConfig, HardwareModel, PlanEntry};
pub use predictor::{BatchFeatures, PredictorModel, ProfileGrid};
pub use scheduler::{Scheduler, SchedulerConfig};
pub use workload::{Request, RequestClass, RequestStream};
