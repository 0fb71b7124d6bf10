//! Executes single (policy, budget) runs in either mode.

use anyhow::{Context, Result};
use momentkv::metrics::{mean_oracle_agreement, ReportBuilder, RunMode};
use momentkv::trace::{replay, ReplayOptions};
use momentkv::{DecodeSession, Policy, PolicyReport, Scalar, ToyModel, TraceFile};

use crate::config::{Precision, RunConfig};

/// A finished run: its report plus, in closed loop, the generated tokens.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: PolicyReport,
    pub tokens: Vec<usize>,
    /// Per-step policy time, closed loop only.
    pub policy_nanos: Vec<u64>,
}

/// The toy model, built once and shared by every closed-loop run.
pub enum Model {
    F32(ToyModel<f32>),
    F64(ToyModel<f64>),
}

impl Model {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let spec = cfg.model.spec(cfg.seed());
        Ok(match cfg.model.precision {
            Precision::F32 => Model::F32(ToyModel::new(spec).context("building toy model")?),
            Precision::F64 => Model::F64(ToyModel::new(spec).context("building toy model")?),
        })
    }

    pub fn run(&self, cfg: &RunConfig, policy: Policy) -> Result<RunOutput> {
        match self {
            Model::F32(m) => closed_loop(m, cfg, policy),
            Model::F64(m) => closed_loop(m, cfg, policy),
        }
    }
}

fn closed_loop<S: Scalar>(
    model: &ToyModel<S>,
    cfg: &RunConfig,
    policy: Policy,
) -> Result<RunOutput> {
    let prompt = cfg.model.prompt(cfg.seed());
    let n_layers = model.spec().n_layers;
    let mut session = DecodeSession::start(model, &prompt, policy)
        .with_context(|| format!("starting {policy}"))?;
    let mut builder = ReportBuilder::new(policy, RunMode::ClosedLoop, prompt.len(), n_layers)
        .with_cdf(cfg.cdf_window);
    let mut tokens = Vec::with_capacity(cfg.steps());
    let mut policy_nanos = Vec::with_capacity(cfg.steps());
    for _ in 0..cfg.steps() {
        let out = session
            .step()
            .with_context(|| format!("decoding with {policy}"))?;
        builder.record_step(
            out.step,
            &out.attention_rows,
            &out.decisions,
            &out.retained_mass,
            &out.cache_size_pre,
            &out.cache_size_post,
            out.policy_nanos,
            out.step_nanos,
        );
        tokens.push(out.next_token);
        policy_nanos.push(out.policy_nanos);
    }
    let survivors = session
        .layers()
        .iter()
        .map(|l| l.pool().decode_positions())
        .collect();
    Ok(RunOutput {
        report: builder.finish(survivors, &cfg.hitters),
        tokens,
        policy_nanos,
    })
}

/// Replays `trace`. Oracle agreement is reported when the trace is long
/// enough for the configured horizon; otherwise a note says why not.
pub fn replay_run(trace: &TraceFile, cfg: &RunConfig, policy: Policy) -> Result<RunOutput> {
    let opts = ReplayOptions {
        renormalize: cfg.renormalize,
        cdf_window: Some(cfg.cdf_window),
        oracle_horizon: None,
        hitters: cfg.hitters.clone(),
    };
    let mut report = replay(trace, policy, &opts).with_context(|| format!("replaying {policy}"))?;
    match mean_oracle_agreement(trace, &report.records, cfg.oracle_horizon) {
        Ok(score) => report.oracle_agreement = score,
        Err(e) => report
            .notes
            .push(format!("oracle agreement unavailable: {e}")),
    }
    Ok(RunOutput {
        report,
        tokens: Vec::new(),
        policy_nanos: Vec::new(),
    })
}

/// Loads the configured trace, cut to `steps` when that is shorter.
pub fn load_trace(cfg: &RunConfig) -> Result<TraceFile> {
    let path = cfg.trace.as_ref().context("no trace configured")?;
    let mut trace = momentkv::trace::read_trace(path)
        .with_context(|| format!("reading trace {}", path.display()))?;
    if let Some(steps) = cfg.steps {
        if steps < trace.header.n_steps {
            trace.steps.truncate(steps);
            trace.header.n_steps = steps;
        }
    }
    Ok(trace)
}
