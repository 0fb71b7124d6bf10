//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use momentkv::metrics::median;
use momentkv::trace::{
    gen_heavy_hitter_trace, gen_recency_burst_trace, toy_model_trace, write_trace, Dip,
    HeavyHitterParams, Hitter, RecencyBurstParams,
};
use momentkv::{Policy, PolicyKind, PolicyParams, PolicyReport, ToyModel, TraceFile};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigEcho, Mode, ModelConfig, Precision, RunConfig};
use crate::output::{write_run, write_table};
use crate::run::{load_trace, replay_run, Model, RunOutput};

/// Worker pool sized by `MOMENTKV_THREADS` when set.
fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MOMENTKV_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("MOMENTKV_THREADS={v:?} is not a thread count"))?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    Ok(builder.build()?)
}

enum Source {
    Model(Model),
    Trace(TraceFile),
}

impl Source {
    fn open(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.mode {
            Mode::ClosedLoop => Source::Model(Model::build(cfg)?),
            Mode::Replay => Source::Trace(load_trace(cfg)?),
        })
    }

    fn run(&self, cfg: &RunConfig, policy: Policy) -> Result<RunOutput> {
        let out = match self {
            Source::Model(m) => m.run(cfg, policy)?,
            Source::Trace(t) => replay_run(t, cfg, policy)?,
        };
        check_budget_parity(&out.report)?;
        Ok(out)
    }
}

/// Total capacity of bounded policies never exceeds prompt + decode budget.
fn check_budget_parity(report: &PolicyReport) -> Result<()> {
    if let Some(limit) = report.capacity_limit {
        ensure!(
            report.max_total_size <= limit,
            "{}: cache reached {} slots, above M + B_d = {limit}",
            report.label,
            report.max_total_size
        );
    }
    Ok(())
}

fn echo<'a>(command: &'a str, cfg: &'a RunConfig, report: &PolicyReport) -> ConfigEcho<'a> {
    let replay = cfg.mode == Mode::Replay;
    ConfigEcho {
        command,
        mode: cfg.mode,
        run_id: report.run_id.clone(),
        label: report.label.clone(),
        seed: cfg.seed,
        steps: report.steps,
        prefill_len: report.prefill_len,
        trace: cfg.trace.as_deref().filter(|_| replay),
        renormalize: replay.then_some(cfg.renormalize),
        hitters: &cfg.hitters,
        oracle_horizon: cfg.oracle_horizon,
        cdf_window: cfg.cdf_window,
        policy: report.policy,
        model: (!replay).then_some(&cfg.model),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Runs every policy in parallel, writes each report, and fails if any run
/// or write failed.
fn run_all(command: &str, cfg: &RunConfig, policies: &[Policy]) -> Result<Vec<RunOutput>> {
    let source = Source::open(cfg)?;
    let results: Vec<Result<RunOutput>> =
        worker_pool()?.install(|| policies.par_iter().map(|&p| source.run(cfg, p)).collect());
    let mut done = Vec::new();
    let mut failures = 0;
    for (policy, result) in policies.iter().zip(results) {
        let written = result.and_then(|out| {
            let dir = write_run(&cfg.out, &out.report, &echo(command, cfg, &out.report))?;
            Ok((out, dir))
        });
        match written {
            Ok((out, dir)) => {
                let r = &out.report;
                println!(
                    "{:<28} max_total {:>6}{} evictions {:>7} retained mean {:.4} min {:.4} hitters {} oracle {}  -> {}",
                    r.run_id,
                    r.max_total_size,
                    r.capacity_limit.map_or(String::new(), |l| format!("/{l}")),
                    r.total_evictions,
                    r.mean_retained_mass,
                    r.min_retained_mass,
                    fmt_opt(r.heavy_hitter_retention),
                    fmt_opt(r.oracle_agreement),
                    dir.display()
                );
                for note in &r.notes {
                    println!("    note: {note}");
                }
                done.push(out);
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {policy}: {e:#}");
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} runs failed", policies.len());
    }
    Ok(done)
}

pub fn simulate(cfg: &RunConfig, per_alpha: bool) -> Result<()> {
    cfg.validate()?;
    let policies = cfg.resolve_policies(per_alpha)?;
    run_all("simulate", cfg, &policies)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    budget: usize,
    alpha: f64,
    run_id: String,
    mean_retained_mass: f64,
    min_retained_mass: f64,
    heavy_hitter_retention: Option<f64>,
    oracle_agreement: Option<f64>,
    total_evictions: usize,
    h2o_equivalent: bool,
}

pub fn sweep_alpha(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    ensure!(
        cfg.policies.iter().any(|p| p.kind == PolicyKind::MomentKv),
        "sweep-alpha needs a moment_kv entry in the policy list"
    );
    ensure!(
        !cfg.alpha_sweep.is_empty(),
        "sweep-alpha needs alphas (--alpha or alpha_sweep = [...])"
    );
    let policies: Vec<Policy> = cfg
        .resolve_policies(true)?
        .into_iter()
        .filter(|p| p.kind() == PolicyKind::MomentKv)
        .collect();
    let outputs = run_all("sweep-alpha", cfg, &policies)?;
    let mut rows: Vec<SweepRow> = outputs
        .iter()
        .map(|o| {
            let r = &o.report;
            let PolicyParams::MomentKv { momentum_alpha } = r.policy.params else {
                unreachable!("sweep runs are MomentKV only")
            };
            SweepRow {
                budget: r.policy.decode_budget,
                alpha: momentum_alpha,
                run_id: r.run_id.clone(),
                mean_retained_mass: r.mean_retained_mass,
                min_retained_mass: r.min_retained_mass,
                heavy_hitter_retention: r.heavy_hitter_retention,
                oracle_agreement: r.oracle_agreement,
                total_evictions: r.total_evictions,
                h2o_equivalent: momentum_alpha == 1.0,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.budget.cmp(&b.budget).then(a.alpha.total_cmp(&b.alpha)));
    println!();
    println!(
        "{:>7} {:>6} {:>12} {:>12} {:>9} {:>9}",
        "budget", "alpha", "retained", "min_retained", "hitters", "oracle"
    );
    for r in &rows {
        println!(
            "{:>7} {:>6} {:>12.4} {:>12.4} {:>9} {:>9}{}",
            r.budget,
            r.alpha,
            r.mean_retained_mass,
            r.min_retained_mass,
            fmt_opt(r.heavy_hitter_retention),
            fmt_opt(r.oracle_agreement),
            if r.h2o_equivalent {
                "  (H2O-equivalent: cumulative scores, r = 0)"
            } else {
                ""
            }
        );
    }
    let path = write_table(&cfg.out, "sweep.csv", &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    run_id: String,
    budget: Option<usize>,
    steps: usize,
    mean_step_nanos: f64,
    mean_policy_nanos: f64,
    median_policy_nanos: f64,
    steady_policy_nanos: f64,
    policy_share: f64,
    overhead_vs_full: f64,
    first_eviction_step: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ScalingRow {
    family: String,
    budget_low: usize,
    budget_high: usize,
    cost_low: f64,
    cost_high: f64,
    ratio: f64,
    bound: f64,
    within_bound: bool,
}

fn first_eviction(report: &PolicyReport) -> Option<usize> {
    report
        .records
        .iter()
        .filter(|r| !r.victim_positions.is_empty())
        .map(|r| r.step)
        .min()
}

/// Median policy time over steps where the decode pool was already full.
fn steady_cost(out: &RunOutput) -> f64 {
    let b = out.report.policy.pool_budget();
    let steady: Vec<u64> = out
        .policy_nanos
        .iter()
        .enumerate()
        .filter(|(i, _)| b != usize::MAX && i + 1 > b + 1)
        .map(|(_, &n)| n)
        .collect();
    if steady.is_empty() {
        median(&out.policy_nanos)
    } else {
        median(&steady)
    }
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    ensure!(
        cfg.mode == Mode::ClosedLoop,
        "bench times the live decoder and needs mode = closed_loop, not replay"
    );
    cfg.validate()?;
    let mut policies = cfg.resolve_policies(false)?;
    if !policies.contains(&Policy::full_cache()) {
        policies.insert(0, Policy::full_cache());
    }
    let model = Model::build(cfg)?;
    // Sequential on purpose: concurrent runs would contend for cores and
    // distort each other's timings.
    let mut outputs = Vec::new();
    for &p in &policies {
        let out = model.run(cfg, p)?;
        check_budget_parity(&out.report)?;
        write_run(&cfg.out, &out.report, &echo("bench", cfg, &out.report))?;
        outputs.push(out);
    }
    let full = outputs
        .iter()
        .find(|o| o.report.policy == Policy::full_cache())
        .expect("full cache run present");
    let full_step = full.report.timing.mean_step_nanos;

    let mut rows = Vec::new();
    for out in &outputs {
        let r = &out.report;
        let first = first_eviction(r);
        let agree_until = first.unwrap_or(out.tokens.len());
        ensure!(
            out.tokens[..agree_until] == full.tokens[..agree_until],
            "{}: token stream diverges from FullCache before its first eviction",
            r.label
        );
        rows.push(BenchRow {
            run_id: r.run_id.clone(),
            budget: (r.policy.pool_budget() != usize::MAX).then_some(r.policy.decode_budget),
            steps: r.steps,
            mean_step_nanos: r.timing.mean_step_nanos,
            mean_policy_nanos: r.timing.mean_policy_nanos,
            median_policy_nanos: r.timing.median_policy_nanos,
            steady_policy_nanos: steady_cost(out),
            policy_share: r.timing.policy_share,
            overhead_vs_full: r.timing.mean_step_nanos / full_step - 1.0,
            first_eviction_step: first,
        });
    }

    // O(B_d) check per policy family across the configured budgets.
    let mut scaling = Vec::new();
    let family = |p: &Policy| p.run_id().rsplit_once("-b").map(|(f, _)| f.to_string());
    let mut families: Vec<String> = outputs
        .iter()
        .filter_map(|o| family(&o.report.policy))
        .collect();
    families.dedup();
    for fam in families {
        let mut members: Vec<(usize, f64)> = outputs
            .iter()
            .filter(|o| family(&o.report.policy).as_deref() == Some(fam.as_str()))
            .map(|o| (o.report.policy.decode_budget, steady_cost(o)))
            .collect();
        if members.len() < 2 {
            continue;
        }
        members.sort_by_key(|m| m.0);
        let (lo, hi) = (members[0], members[members.len() - 1]);
        let ratio = hi.1 / lo.1;
        let bound = hi.0 as f64 / lo.0 as f64;
        scaling.push(ScalingRow {
            family: fam,
            budget_low: lo.0,
            budget_high: hi.0,
            cost_low: lo.1,
            cost_high: hi.1,
            ratio,
            bound,
            within_bound: ratio <= bound,
        });
    }

    println!(
        "{:<28} {:>7} {:>12} {:>12} {:>12} {:>8} {:>9} {:>8}",
        "run", "budget", "step_ns", "policy_ns", "steady_ns", "share", "overhead", "evict@"
    );
    for r in &rows {
        println!(
            "{:<28} {:>7} {:>12.0} {:>12.0} {:>12.0} {:>7.2}% {:>8.2}% {:>8}",
            r.run_id,
            r.budget.map_or("-".into(), |b| b.to_string()),
            r.mean_step_nanos,
            r.mean_policy_nanos,
            r.steady_policy_nanos,
            r.policy_share * 100.0,
            r.overhead_vs_full * 100.0,
            r.first_eviction_step.map_or("-".into(), |s| s.to_string()),
        );
    }
    for s in &scaling {
        println!(
            "scaling {:<20} B_d {} -> {}: policy cost x{:.2} (linear bound x{:.2}) {}",
            s.family,
            s.budget_low,
            s.budget_high,
            s.ratio,
            s.bound,
            if s.within_bound { "ok" } else { "ABOVE BOUND" }
        );
    }
    println!("token streams match FullCache up to each run's first eviction");
    write_table(&cfg.out, "bench.csv", &rows)?;
    let path = write_table(&cfg.out, "bench_scaling.csv", &scaling)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TraceKind {
    HeavyHitter,
    RecencyBurst,
    ToyModel,
}

#[derive(Debug, Clone, clap::Args)]
pub struct GenTraceArgs {
    #[arg(value_enum)]
    pub kind: TraceKind,
    /// Output file.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub prefill_len: usize,
    #[arg(long, default_value_t = 512)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Heavy hitter as POSITION:MASS (repeatable).
    #[arg(long = "hitter", value_parser = parse_hitter)]
    pub hitters: Vec<Hitter>,
    /// Dip as POSITION:START_STEP:LEN (repeatable).
    #[arg(long = "dip", value_parser = parse_dip)]
    pub dips: Vec<Dip>,
    #[arg(long, default_value_t = 0.0)]
    pub self_mass: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub salience_spread: f64,
    /// Recency-burst: fraction of the window forming the burst.
    #[arg(long, default_value_t = 0.1)]
    pub concentration: f64,
    /// Recency-burst: window length in decode tokens.
    #[arg(long, default_value_t = 256)]
    pub window: usize,
    /// Toy model: read the `[model]` table from this run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Toy model: store one row per head instead of the head average.
    #[arg(long)]
    pub per_head: bool,
}

fn parse_hitter(s: &str) -> Result<Hitter, String> {
    let (p, m) = s.split_once(':').ok_or("expected POSITION:MASS")?;
    Ok(Hitter {
        position: p.parse().map_err(|e| format!("position: {e}"))?,
        base_mass: m.parse().map_err(|e| format!("mass: {e}"))?,
    })
}

fn parse_dip(s: &str) -> Result<Dip, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [p, start, len] = parts[..] else {
        return Err("expected POSITION:START_STEP:LEN".into());
    };
    let num = |v: &str, what: &str| v.parse::<usize>().map_err(|e| format!("{what}: {e}"));
    Ok(Dip {
        position: num(p, "position")?,
        start_step: num(start, "start step")?,
        len: num(len, "length")?,
    })
}

fn toy_trace(args: &GenTraceArgs) -> Result<TraceFile> {
    let model_cfg = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig {
            prompt_len: args.prefill_len,
            ..ModelConfig::default()
        },
    };
    let prompt = model_cfg.prompt(args.seed);
    let spec = model_cfg.spec(args.seed);
    let trace = match model_cfg.precision {
        Precision::F32 => toy_model_trace(
            &ToyModel::<f32>::new(spec)?,
            &prompt,
            args.steps,
            args.per_head,
        )?,
        Precision::F64 => toy_model_trace(
            &ToyModel::<f64>::new(spec)?,
            &prompt,
            args.steps,
            args.per_head,
        )?,
    };
    Ok(trace)
}

pub fn gen_trace(args: &GenTraceArgs) -> Result<()> {
    let trace = match args.kind {
        TraceKind::HeavyHitter => gen_heavy_hitter_trace(&HeavyHitterParams {
            prefill_len: args.prefill_len,
            steps: args.steps,
            n_layers: args.layers,
            hitters: args.hitters.clone(),
            dips: args.dips.clone(),
            self_mass: args.self_mass,
            noise: args.noise,
            salience_spread: args.salience_spread,
            seed: args.seed,
        })?,
        TraceKind::RecencyBurst => gen_recency_burst_trace(&RecencyBurstParams {
            n_layers: args.layers,
            window: args.window,
            seed: args.seed,
            ..RecencyBurstParams::new(args.prefill_len, args.steps, args.concentration)
        })?,
        TraceKind::ToyModel => toy_trace(args)?,
    };
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    write_trace(&trace, &args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    print_header(&args.output, &trace)
}

fn print_header(path: &Path, trace: &TraceFile) -> Result<()> {
    let h = &trace.header;
    let bytes = std::fs::metadata(path)?.len();
    println!(
        "wrote {} ({bytes} bytes): ATTRC01 source={:?} M={} T={} layers={} heads={} head_averaged={} tag={}",
        path.display(),
        h.source,
        h.prefill_len,
        h.n_steps,
        h.n_layers,
        h.n_heads,
        h.head_averaged,
        h.model_tag
    );
    Ok(())
}
