//! Command implementations: each stage reads the experiment config, runs
//! the corresponding library pipeline, and writes artifacts that embed the
//! resolved config and its content hash.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyserve_core::config::{ExperimentConfig, set_config_path};
use hyserve_core::metrics::{compute, RunMetrics};
use hyserve_core::predictor::{fit, mape, profile_hardware, samples_to_csv, FeatureFlags, PredictorModel};
use hyserve_core::profiler::{search_budget, BudgetReport};
use hyserve_core::psm::PrefixTree;
use hyserve_core::sim::RunReport;

fn load_config(path: &Path, seed_overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    for ov in seed_overrides {
        let (key, value) = ov
            .split_once('=')
            .with_context(|| format!("seed override `{ov}` is not KEY=VALUE"))?;
        let value: u64 = value
            .parse()
            .with_context(|| format!("seed override `{ov}` has a non-integer value"))?;
        match key {
            "workload" => cfg.seeds.workload = value,
            "hardware" => cfg.seeds.hardware = value,
            "psm" => cfg.seeds.psm = value,
            "profiler" => cfg.seeds.profiler = value,
            other => bail!("unknown seed key `{other}` (expected workload|hardware|psm|profiler)"),
        }
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<std::path::PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn flags(cfg: &ExperimentConfig) -> FeatureFlags {
    FeatureFlags {
        s_d2: cfg.predictor.enable_s_d2,
    }
}

struct TrainedModel {
    model: PredictorModel,
    holdout_mape: f64,
    samples: usize,
    degenerate: bool,
}

fn train(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    let mut hw = cfg.hardware;
    hw.seed = cfg.seeds.hardware;
    let out = profile_hardware(&hw, &cfg.predictor.grid, cfg.seeds.profiler);
    if out.degenerate {
        eprintln!("warning: profiling grid leaves some feature constant (rank may suffer)");
    }
    let mut samples = out.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.profiler.wrapping_add(1));
    samples.shuffle(&mut rng);
    let holdout = ((samples.len() as f64) * cfg.predictor.holdout_frac).round() as usize;
    let split = samples.len().saturating_sub(holdout.max(1));
    let model = fit(&samples[..split], flags(cfg)).context("fitting the latency predictor")?;
    let holdout_mape = mape(&model, &samples[split..]);
    Ok(TrainedModel {
        model,
        holdout_mape,
        samples: samples.len(),
        degenerate: out.degenerate,
    })
}

pub fn cmd_train_predictor(config: &Path, out: Option<&Path>, seeds: &[String]) -> Result<()> {
    let cfg = load_config(config, seeds)?;
    let dir = out_dir(&cfg, out)?;
    let trained = train(&cfg)?;

    let mut hw = cfg.hardware;
    hw.seed = cfg.seeds.hardware;
    let samples = profile_hardware(&hw, &cfg.predictor.grid, cfg.seeds.profiler).samples;
    let csv_file = fs::File::create(dir.join("samples.csv"))?;
    samples_to_csv(&samples, csv_file)?;

    let doc = serde_json::json!({
        "model": trained.model.to_json(),
        "report": {
            "samples": trained.samples,
            "train_mape": trained.model.fit_stats.train_mape,
            "holdout_mape": trained.holdout_mape,
            "degenerate_grid": trained.degenerate,
        },
        "config_hash": cfg.content_hash(),
        "config": cfg,
    });
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&doc)?)?;
    println!(
        "trained on {} samples: train MAPE {:.6}, held-out MAPE {:.6}",
        trained.samples, trained.model.fit_stats.train_mape, trained.holdout_mape
    );
    println!("model written to {}", dir.join("model.json").display());
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PredictorModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let inner = doc.get("model").unwrap_or(&doc);
    Ok(PredictorModel::from_json(inner)?)
}

pub fn cmd_profile(config: &Path, model_path: &Path, out: Option<&Path>, seeds: &[String]) -> Result<()> {
    let cfg = load_config(config, seeds)?;
    let dir = out_dir(&cfg, out)?;
    let model = load_model(model_path)?;
    let report = run_profile(&cfg, &model)?;
    let doc = serde_json::json!({
        "report": report,
        "config_hash": cfg.content_hash(),
        "config": cfg,
    });
    fs::write(dir.join("profile.json"), serde_json::to_string_pretty(&doc)?)?;
    println!("budget L* = {:.4} ms after {} probes", report.budget_ms, report.probes.len());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("report written to {}", dir.join("profile.json").display());
    Ok(())
}

fn run_profile(cfg: &ExperimentConfig, model: &PredictorModel) -> Result<BudgetReport> {
    let env = cfg.build_env()?;
    let seeds = cfg.profiling_seeds(cfg.profiler.trials);
    let report = search_budget(&env, model, &cfg.slos, &cfg.profiler, &seeds)?;
    Ok(report)
}

pub struct SimulationOutput {
    pub report: RunReport,
    pub metrics: RunMetrics,
    pub budget_ms: f64,
}

fn run_simulation(cfg: &ExperimentConfig, model: &PredictorModel, budget_ms: f64) -> Result<SimulationOutput> {
    let env = cfg.build_env()?;
    let report = env.run(budget_ms, model)?;
    let metrics = compute(&report.log.events, report.final_clock_ms, cfg.window_s)?;
    Ok(SimulationOutput {
        report,
        metrics,
        budget_ms,
    })
}

pub fn cmd_simulate(
    config: &Path,
    model_path: &Path,
    budget_ms: Option<f64>,
    profile_report: Option<&Path>,
    out: Option<&Path>,
    seeds: &[String],
) -> Result<()> {
    let cfg = load_config(config, seeds)?;
    let dir = out_dir(&cfg, out)?;
    let model = load_model(model_path)?;
    let budget = match (budget_ms, profile_report) {
        (Some(b), _) => b,
        (None, Some(path)) => {
            let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
            doc.pointer("/report/budget_ms")
                .and_then(|v| v.as_f64())
                .context("profile report lacks report/budget_ms")?
        }
        (None, None) => bail!("provide --budget-ms or --profile-report"),
    };
    let sim = run_simulation(&cfg, &model, budget)?;

    let log_file = fs::File::create(dir.join("events.jsonl"))?;
    sim.report.log.write_jsonl(std::io::BufWriter::new(log_file))?;
    write_summary_csv(&dir.join("summary.csv"), &cfg, &[(None, &sim)])?;
    write_windows_csv(&dir.join("windows.csv"), &sim.metrics)?;
    println!(
        "simulated {:.1} s: online p99 TTFT {:.2} ms, p99 TBT {:.2} ms, offline TPS {:.1}",
        sim.report.final_clock_ms / 1000.0,
        sim.metrics.p99_ttft,
        sim.metrics.p99_tbt,
        sim.metrics.offline_tps
    );
    println!("artifacts written to {}", dir.display());
    Ok(())
}

pub fn cmd_sweep(
    config: &Path,
    axis: &str,
    values: &[String],
    out: Option<&Path>,
    seeds: &[String],
) -> Result<()> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let base = load_config(config, seeds)?;
    let dir = out_dir(&base, out)?;
    let raw = serde_json::to_value(&base)?;
    let mut rows: Vec<(Option<String>, SimulationOutput)> = Vec::new();
    let mut configs = Vec::new();
    for value in values {
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.clone()));
        let mut doc = raw.clone();
        set_config_path(&mut doc, axis, parsed)?;
        let cfg: ExperimentConfig = serde_json::from_value(doc).context("sweep config invalid")?;
        cfg.validate()?;
        let trained = train(&cfg)?;
        let profile = run_profile(&cfg, &trained.model)?;
        let sim = run_simulation(&cfg, &trained.model, profile.budget_ms)?;
        println!(
            "{axis} = {value}: L* {:.3} ms, total TPS {:.1}, offline TPS {:.1}",
            profile.budget_ms, sim.metrics.total_tps, sim.metrics.offline_tps
        );
        rows.push((Some(value.clone()), sim));
        configs.push(cfg);
    }
    let refs: Vec<(Option<String>, &SimulationOutput)> =
        rows.iter().map(|(v, s)| (v.clone(), s)).collect();
    write_summary_csv_multi(&dir.join("sweep.csv"), axis, &configs, &refs)?;
    println!("sweep written to {}", dir.join("sweep.csv").display());
    Ok(())
}

pub fn cmd_dump_trie(config: &Path, seeds: &[String]) -> Result<()> {
    let cfg = load_config(config, seeds)?;
    let (_, offline) = cfg.build_workload()?;
    let mut tree = PrefixTree::new();
    for r in &offline.requests {
        tree.insert(r.id, &r.prompt_path)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    print!("{}", tree.dump());
    println!("{} offline requests, {} trie nodes", offline.len(), tree.node_count());
    Ok(())
}

const SUMMARY_HEADER: [&str; 22] = [
    "config_hash",
    "budget_ms",
    "horizon_ms",
    "steps",
    "mean_ttft_ms",
    "p99_ttft_ms",
    "mean_tbt_ms",
    "p99_tbt_ms",
    "online_tps",
    "offline_tps",
    "total_tps",
    "online_qps",
    "offline_qps",
    "online_tokens",
    "offline_tokens",
    "completed_online",
    "completed_offline",
    "dropped_online",
    "prefill_tokens_saved",
    "preemptions",
    "online_overdraft_steps",
    "online_qps_offline_tps_corr",
];

fn summary_row(cfg: &ExperimentConfig, sim: &SimulationOutput) -> Vec<String> {
    let m = &sim.metrics;
    vec![
        cfg.content_hash(),
        sim.budget_ms.to_string(),
        sim.report.final_clock_ms.to_string(),
        sim.report.steps_executed.to_string(),
        m.mean_ttft.to_string(),
        m.p99_ttft.to_string(),
        m.mean_tbt.to_string(),
        m.p99_tbt.to_string(),
        m.online_tps.to_string(),
        m.offline_tps.to_string(),
        m.total_tps.to_string(),
        m.online_qps.to_string(),
        m.offline_qps.to_string(),
        m.online_tokens.to_string(),
        m.offline_tokens.to_string(),
        m.completed_online.to_string(),
        m.completed_offline.to_string(),
        m.dropped_online.to_string(),
        sim.report.prefill_tokens_saved.to_string(),
        sim.report.preempt_count.to_string(),
        sim.report.audit.online_overdraft_steps.to_string(),
        m.breakdown
            .online_qps_offline_tps_corr
            .map(|c| c.to_string())
            .unwrap_or_default(),
    ]
}

fn write_summary_csv(
    path: &Path,
    cfg: &ExperimentConfig,
    sims: &[(Option<String>, &SimulationOutput)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for (_, sim) in sims {
        w.write_record(summary_row(cfg, sim))?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary_csv_multi(
    path: &Path,
    axis: &str,
    configs: &[ExperimentConfig],
    sims: &[(Option<String>, &SimulationOutput)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![axis.to_string()];
    header.extend(SUMMARY_HEADER.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (cfg, (value, sim)) in configs.iter().zip(sims) {
        let mut row = vec![value.clone().unwrap_or_default()];
        row.extend(summary_row(cfg, sim));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_windows_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window_start_s", "online_tps", "offline_tps", "online_qps"])?;
    for win in &metrics.breakdown.windows {
        w.write_record([
            win.window_start_s.to_string(),
            win.online_tps.to_string(),
            win.offline_tps.to_string(),
            win.online_qps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
