//! Experiment configuration: one JSON document describing hardware, engine,
//! workloads, predictor, SLOs, profiler and scheduler settings, with
//! explicit seeds for every randomness source.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{EngineConfig, HardwareModel};
use crate::predictor::ProfileGrid;
use crate::profiler::{BudgetSearchConfig, SloSpec};
use crate::scheduler::SchedulerConfig;
use crate::sim::{SimEnv, Termination};
use crate::workload::{
    load_trace, sample_to_qps, synth_arrivals, synth_prefix_workload, BurstSpec, LengthSpec,
    RequestClass, RequestStream, WorkloadError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSource {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub rate_qps: f64,
    pub duration_s: f64,
    pub burst: BurstSpec,
    pub lengths: LengthSpec,
    /// Zero all arrival times: the stream becomes a backlog available at
    /// simulation start (typical for offline pools).
    #[serde(default)]
    pub as_backlog: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefixSource {
    pub n_groups: u32,
    pub per_group: u32,
    pub shared_tokens: u32,
    pub unique_tokens: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSource {
    Trace(TraceSource),
    Synthetic(SyntheticSource),
    SyntheticPrefix(PrefixSource),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleSpec {
    pub target_qps: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSection {
    pub online: StreamSource,
    #[serde(default)]
    pub online_sample: Option<SampleSpec>,
    #[serde(default)]
    pub offline: Option<StreamSource>,
    #[serde(default)]
    pub offline_sample: Option<SampleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorSection {
    pub enable_s_d2: bool,
    pub grid: ProfileGrid,
    pub holdout_frac: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        PredictorSection {
            enable_s_d2: true,
            grid: ProfileGrid::default(),
            holdout_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub workload: u64,
    pub hardware: u64,
    pub psm: u64,
    pub profiler: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            workload: 1,
            hardware: 2,
            psm: 3,
            profiler: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub hardware: HardwareModel,
    pub engine: EngineConfig,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    pub slos: Vec<SloSpec>,
    #[serde(default)]
    pub profiler: BudgetSearchConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub seeds: Seeds,
    /// Temporal-breakdown window in seconds.
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_window_s() -> f64 {
    10.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hardware
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.engine.block_size == 0 || self.engine.kv_blocks == 0 {
            return Err(ConfigError::Invalid("engine blocks must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.scheduler.psm_utility) {
            return Err(ConfigError::Invalid("psm_utility must be in [0, 1]".into()));
        }
        for s in [Some(&self.workload.online), self.workload.offline.as_ref()]
            .into_iter()
            .flatten()
        {
            if let StreamSource::Trace(t) = s {
                if !t.path.exists() {
                    return Err(ConfigError::Invalid(format!(
                        "trace file not found: {}",
                        t.path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the resolved config's canonical JSON.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn build_stream(
        &self,
        source: &StreamSource,
        sample: Option<&SampleSpec>,
        class: RequestClass,
        seed: u64,
    ) -> Result<RequestStream, ConfigError> {
        let mut stream = match source {
            StreamSource::Trace(t) => load_trace(&t.path, class)?,
            StreamSource::Synthetic(s) => {
                let mut stream =
                    synth_arrivals(s.rate_qps, s.duration_s, &s.burst, &s.lengths, seed)?;
                for r in &mut stream.requests {
                    r.class = class;
                    r.priority = class.default_priority();
                    if s.as_backlog {
                        r.arrival_ms = 0;
                    }
                }
                stream
            }
            StreamSource::SyntheticPrefix(p) => {
                synth_prefix_workload(p.n_groups, p.per_group, p.shared_tokens, p.unique_tokens, seed)?
            }
        };
        if let Some(spec) = sample {
            stream = sample_to_qps(&stream, spec.target_qps, spec.duration_s, seed ^ 0x5a5a)?;
        }
        Ok(stream)
    }

    /// Build online and offline streams with globally unique request IDs
    /// (offline IDs are offset past the online range).
    pub fn build_workload(&self) -> Result<(RequestStream, RequestStream), ConfigError> {
        let online = self.build_stream(
            &self.workload.online,
            self.workload.online_sample.as_ref(),
            RequestClass::Online,
            self.seeds.workload,
        )?;
        let mut offline = match &self.workload.offline {
            Some(src) => self.build_stream(
                src,
                self.workload.offline_sample.as_ref(),
                RequestClass::Offline,
                self.seeds.workload.wrapping_add(0x0ff1),
            )?,
            None => RequestStream::default(),
        };
        let offset = online.requests.iter().map(|r| r.id + 1).max().unwrap_or(0);
        for r in &mut offline.requests {
            r.id += offset;
        }
        Ok((online, offline))
    }

    /// Assemble the simulation environment this config describes.
    pub fn build_env(&self) -> Result<SimEnv, ConfigError> {
        let (online, offline) = self.build_workload()?;
        let termination = if online.is_empty() {
            Termination::AllDone
        } else {
            Termination::OnlineWindow
        };
        let mut env = SimEnv::new(online, offline);
        env.engine_cfg = self.engine;
        env.hw = self.hardware;
        env.hw.seed = self.seeds.hardware;
        env.sched_cfg = self.scheduler;
        env.psm_seed = self.seeds.psm;
        env.termination = termination;
        Ok(env)
    }

    /// Profiling trial seeds, disjoint from the evaluation (hardware) seed.
    pub fn profiling_seeds(&self, trials: usize) -> Vec<u64> {
        (0..trials.max(1) as u64)
            .map(|i| self.seeds.profiler.wrapping_add(i))
            .collect()
    }
}

/// Set a scalar field addressed by a slash-separated path (for sweeps),
/// e.g. `scheduler/psm_utility` or `slos/0/tolerance`.
pub fn set_config_path(
    doc: &mut serde_json::Value,
    path: &str,
    new_value: serde_json::Value,
) -> Result<(), ConfigError> {
    if !(new_value.is_number() || new_value.is_string() || new_value.is_boolean()) {
        return Err(ConfigError::Invalid(format!(
            "sweep value for {path} must be a scalar"
        )));
    }
    let mut cur = doc;
    let parts: Vec<&str> = path.split('/').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i == parts.len() - 1;
        let next = match cur {
            serde_json::Value::Object(map) => map.get_mut(*part),
            serde_json::Value::Array(items) => part
                .parse::<usize>()
                .ok()
                .and_then(|idx| items.get_mut(idx)),
            _ => None,
        };
        let Some(next) = next else {
            return Err(ConfigError::Invalid(format!(
                "sweep axis not found: {path} (at `{part}`)"
            )));
        };
        if last {
            if next.is_object() || next.is_array() {
                return Err(ConfigError::Invalid(format!(
                    "sweep axis {path} is not a scalar field"
                )));
            }
            *next = new_value;
            return Ok(());
        }
        cur = next;
    }
    unreachable!("empty sweep path rejected above")
}
