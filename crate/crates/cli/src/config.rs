//! Run configuration: a TOML file, overridden by command-line flags, resolved
//! into concrete policies before anything runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use momentkv::metrics::{DEFAULT_CDF_WINDOW, DEFAULT_ORACLE_HORIZON};
use momentkv::model::seeded_prompt;
use momentkv::{ModelSpec, Policy, PolicyConfig, PolicyKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedLoop,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Toy decoder shape and prompt. The weight seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub precision: Precision,
    /// Length of a seeded random prompt; ignored when `prompt` is given.
    pub prompt_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        Self {
            d_model: spec.d_model,
            n_heads: spec.n_heads,
            n_layers: spec.n_layers,
            vocab_size: spec.vocab_size,
            precision: Precision::F32,
            prompt_len: 32,
            prompt: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, seed: u64) -> ModelSpec {
        ModelSpec {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            vocab_size: self.vocab_size,
            seed,
        }
    }

    pub fn prompt(&self, seed: u64) -> Vec<usize> {
        self.prompt
            .clone()
            .unwrap_or_else(|| seeded_prompt(self.vocab_size, self.prompt_len, seed))
    }
}

/// The run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub budgets: Vec<usize>,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    /// Replay only: rescale masked rows to sum to one.
    pub renormalize: bool,
    /// Positions whose survival is reported as heavy-hitter retention.
    pub hitters: Vec<usize>,
    pub oracle_horizon: usize,
    pub cdf_window: usize,
    pub alpha_sweep: Vec<f64>,
    pub model: ModelConfig,
    pub policies: Vec<PolicyConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ClosedLoop,
            steps: None,
            seed: None,
            budgets: Vec::new(),
            out: PathBuf::from("reports"),
            trace: None,
            renormalize: true,
            hitters: Vec::new(),
            oracle_horizon: DEFAULT_ORACLE_HORIZON,
            cdf_window: DEFAULT_CDF_WINDOW,
            alpha_sweep: Vec::new(),
            model: ModelConfig::default(),
            policies: Vec::new(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub budgets: Vec<usize>,
    pub alphas: Vec<f64>,
    pub steps: Option<usize>,
    pub trace: Option<PathBuf>,
    pub policies: Vec<PolicyKind>,
}

pub const DEFAULT_STEPS: usize = 1024;
pub const DEFAULT_BUDGET: usize = 512;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads `path` (or defaults) and applies `overrides`. `default_budgets`
    /// applies when neither source names a budget.
    pub fn assemble(
        path: Option<&Path>,
        overrides: Overrides,
        default_budgets: &[usize],
    ) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(mode) = overrides.mode {
            cfg.mode = mode;
        }
        if let Some(out) = overrides.out {
            cfg.out = out;
        }
        if overrides.seed.is_some() {
            cfg.seed = overrides.seed;
        }
        if !overrides.budgets.is_empty() {
            cfg.budgets = overrides.budgets;
        }
        if !overrides.alphas.is_empty() {
            cfg.alpha_sweep = overrides.alphas;
        }
        if overrides.steps.is_some() {
            cfg.steps = overrides.steps;
        }
        if overrides.trace.is_some() {
            cfg.trace = overrides.trace;
        }
        if !overrides.policies.is_empty() {
            cfg.policies = overrides
                .policies
                .into_iter()
                .map(PolicyConfig::new)
                .collect();
        }
        if path.is_none() && cfg.policies.is_empty() {
            cfg.policies = vec![
                PolicyConfig::new(PolicyKind::FullCache),
                PolicyConfig::new(PolicyKind::MomentKv),
            ];
        }
        if cfg.budgets.is_empty() {
            cfg.budgets = default_budgets.to_vec();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.policies.is_empty(), "config lists no policies");
        ensure!(
            self.budgets.iter().all(|&b| b >= 1),
            "decode budgets must be >= 1"
        );
        match self.mode {
            Mode::ClosedLoop => {
                ensure!(
                    self.seed.is_some(),
                    "closed_loop runs need a seed (--seed or seed = N)"
                );
                ensure!(self.steps != Some(0), "steps must be >= 1");
                let prompt_len = self
                    .model
                    .prompt
                    .as_ref()
                    .map_or(self.model.prompt_len, Vec::len);
                ensure!(prompt_len >= 1, "prompt must hold at least one token");
            }
            Mode::Replay => {
                ensure!(
                    self.trace.is_some(),
                    "replay runs need a trace (--trace or trace = PATH)"
                );
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(DEFAULT_STEPS)
    }

    /// Every (policy, budget) pair to run. Budget-independent policies run
    /// once. An `alpha_sweep`, when `sweep` is set, replaces each MomentKV
    /// entry with one entry per alpha.
    pub fn resolve_policies(&self, sweep: bool) -> Result<Vec<Policy>> {
        let mut configs = Vec::new();
        for p in &self.policies {
            if sweep && p.kind == PolicyKind::MomentKv {
                configs.extend(self.alpha_sweep.iter().map(|&a| PolicyConfig {
                    momentum_alpha: Some(a),
                    ..p.clone()
                }));
            } else {
                configs.push(p.clone());
            }
        }
        let mut out: Vec<Policy> = Vec::new();
        for p in &configs {
            let budgets: Vec<usize> = match (p.kind, p.decode_budget) {
                (PolicyKind::FullCache, _) => vec![0],
                (_, Some(b)) => vec![b],
                (_, None) => self.budgets.clone(),
            };
            for b in budgets {
                let policy = if p.kind == PolicyKind::FullCache {
                    Policy::full_cache()
                } else {
                    p.resolve(b)
                        .with_context(|| format!("resolving {:?} at budget {b}", p.kind))?
                };
                if !out.contains(&policy) {
                    out.push(policy);
                }
            }
        }
        if out.is_empty() {
            bail!("no policies to run");
        }
        Ok(out)
    }
}

/// What a single run directory records about how it was produced.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho<'a> {
    pub command: &'a str,
    pub mode: Mode,
    pub run_id: String,
    pub label: String,
    pub seed: Option<u64>,
    pub steps: usize,
    pub prefill_len: usize,
    pub trace: Option<&'a Path>,
    pub renormalize: Option<bool>,
    pub hitters: &'a [usize],
    pub oracle_horizon: usize,
    pub cdf_window: usize,
    pub policy: Policy,
    pub model: Option<&'a ModelConfig>,
}
