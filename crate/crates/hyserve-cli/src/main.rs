//! `hyserve`: train the latency predictor, profile latency budgets, run
//! hybrid-serving simulations, and sweep config axes.
//!
//! Exit codes: 0 success, 1 validation error, 2 infeasible profiling
//! range, 3 internal invariant breach (budget-safety violation).

mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyserve_core::profiler::ProfileError;
use hyserve_core::sim::RunError;

#[derive(Parser)]
#[command(name = "hyserve", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a seed, e.g. `--seed-override hardware=7`. Repeatable;
    /// keys: workload, hardware, psm, profiler.
    #[arg(long = "seed-override", value_name = "KEY=VALUE")]
    seed_override: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Profile the ground-truth cost model and fit the latency predictor.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
    },
    /// Measure the pure-online baseline and binary-search the largest
    /// SLO-compliant latency budget.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Trained model file (from `train-predictor`).
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the full hybrid simulation and write the event log plus
    /// summary/window CSVs.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Latency budget in ms (alternative to --profile-report).
        #[arg(long)]
        budget_ms: Option<f64>,
        /// Take the budget from a profiler report.
        #[arg(long)]
        profile_report: Option<PathBuf>,
    },
    /// Profile + simulate once per value of a config axis and merge the
    /// summary rows.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Slash-separated config path, e.g. `slos/0/tolerance`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Print the offline workload's prefix trie with DFS indices.
    DumpTrie {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainPredictor { common } => pipeline::cmd_train_predictor(&common.config, common.out.as_deref(), &common.seed_override),
        Command::Profile { common, model } => {
            pipeline::cmd_profile(&common.config, &model, common.out.as_deref(), &common.seed_override)
        }
        Command::Simulate {
            common,
            model,
            budget_ms,
            profile_report,
        } => pipeline::cmd_simulate(
            &common.config,
            &model,
            budget_ms,
            profile_report.as_deref(),
            common.out.as_deref(),
            &common.seed_override,
        ),
        Command::Sweep {
            common,
            axis,
            values,
        } => pipeline::cmd_sweep(&common.config, &axis, &values, common.out.as_deref(), &common.seed_override),
        Command::DumpTrie { common } => {
            pipeline::cmd_dump_trie(&common.config, &common.seed_override)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<ProfileError>() {
            return match p {
                ProfileError::InfeasibleRange { .. } => 2,
                ProfileError::Run(RunError::BudgetViolation { .. }) => 3,
                ProfileError::Run(RunError::Engine(_)) => 3,
                _ => 1,
            };
        }
        if let Some(r) = cause.downcast_ref::<RunError>() {
            return match r {
                RunError::BudgetViolation { .. } | RunError::Engine(_) => 3,
                RunError::SafetyCap(_) => 3,
            };
        }
    }
    1
}
