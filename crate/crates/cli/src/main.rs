//! `momentkv`: run KV-cache eviction experiments on the toy decoder or on
//! recorded attention traces.

mod commands;
mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use momentkv::PolicyKind;

use crate::commands::GenTraceArgs;
use crate::config::{Mode, Overrides, RunConfig, DEFAULT_BUDGET};

#[derive(Debug, Parser)]
#[command(name = "momentkv", version, about = "KV-cache eviction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory (default: reports).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decode budget; repeat for several.
    #[arg(long = "budget")]
    budgets: Vec<usize>,
    /// Momentum factor; repeat for several. Expands MomentKV entries.
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    /// Decode steps (closed loop) or a cap on replayed steps.
    #[arg(long)]
    steps: Option<usize>,
    /// ATTRC01 trace to replay.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Policy kind (moment_kv, streaming_sink, h2o, scope_slide, full_cache); repeatable.
    #[arg(long = "policy", value_parser = parse_kind)]
    policies: Vec<PolicyKind>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (policy, budget) pair and write reports.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Same as `simulate --mode replay`.
    Replay {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic or toy-model ATTRC01 trace.
    GenTrace(GenTraceArgs),
    /// Run MomentKV once per alpha and tabulate the results.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Time policies on the live decoder.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn parse_kind(s: &str) -> Result<PolicyKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown policy kind {s:?}"))
}

fn assemble(run: RunArgs, mode: Option<Mode>, default_budgets: &[usize]) -> Result<RunConfig> {
    let overrides = Overrides {
        mode,
        out: run.out,
        seed: run.seed,
        budgets: run.budgets,
        alphas: run.alphas,
        steps: run.steps,
        trace: run.trace,
        policies: run.policies,
    };
    RunConfig::assemble(run.config.as_deref(), overrides, default_budgets)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { run, mode } => {
            // `--alpha` on simulate runs MomentKV once per alpha
            let per_alpha = !run.alphas.is_empty();
            commands::simulate(&assemble(run, mode, &[DEFAULT_BUDGET])?, per_alpha)
        }
        Command::Replay { run } => {
            let per_alpha = !run.alphas.is_empty();
            commands::simulate(
                &assemble(run, Some(Mode::Replay), &[DEFAULT_BUDGET])?,
                per_alpha,
            )
        }
        Command::GenTrace(args) => commands::gen_trace(&args),
        Command::SweepAlpha { run, mode } => {
            commands::sweep_alpha(&assemble(run, mode, &[DEFAULT_BUDGET])?)
        }
        Command::Bench { run, mode } => commands::bench(&assemble(run, mode, &[256, 512, 1024])?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
