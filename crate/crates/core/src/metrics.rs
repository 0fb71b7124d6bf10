//! Run metrics: retained attention mass, recency-window CDFs, heavy-hitter
//! retention, hindsight-oracle agreement and policy timing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{AttentionRow, EvictionDecision, Policy};
use crate::trace::TraceFile;

/// Recency window used for concentration curves.
pub const DEFAULT_CDF_WINDOW: usize = 256;

/// Look-ahead of the hindsight oracle, in decode steps.
pub const DEFAULT_ORACLE_HORIZON: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("run never held {window} decode tokens, no recency window to measure")]
    RunTooShort { window: usize },
    #[error("oracle horizon {horizon} does not fit after any decision in a {steps}-step trace")]
    HorizonExceedsTrace { horizon: usize, steps: usize },
    #[error("layer {layer} not present in trace with {n_layers} layers")]
    NoSuchLayer { layer: usize, n_layers: usize },
}

/// Fraction of `weights` falling on the `surviving` indices.
///
/// Exactly 1.0 when every index survives.
pub fn retained_mass(weights: &[f64], surviving: &[usize]) -> f64 {
    if surviving.len() >= weights.len() {
        return 1.0;
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let kept: f64 = surviving.iter().map(|&i| weights[i]).sum();
    (kept / total).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Early,
    Middle,
    Late,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Early, LayerGroup::Middle, LayerGroup::Late];

    /// First, middle and last thirds of the layer stack.
    pub fn of(layer: usize, n_layers: usize) -> Self {
        match 3 * layer / n_layers.max(1) {
            0 => LayerGroup::Early,
            1 => LayerGroup::Middle,
            _ => LayerGroup::Late,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerGroup::Early => "early",
            LayerGroup::Middle => "middle",
            LayerGroup::Late => "late",
        }
    }
}

/// Cumulative attention mass within the recency window versus the fraction
/// of window tokens, tokens taken in decreasing weight order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfCurve {
    pub group: LayerGroup,
    /// Number of (step, layer) rows averaged into the curve.
    pub samples: usize,
    /// `mass[k - 1]` = mean share of window mass held by the top `k` tokens.
    pub mass: Vec<f64>,
}

impl CdfCurve {
    pub fn window(&self) -> usize {
        self.mass.len()
    }

    /// Token fraction of point `k` (1-based).
    pub fn fraction(&self, k: usize) -> f64 {
        k as f64 / self.window() as f64
    }

    /// Curve value at a token fraction in `[0, 1]`, linear between points.
    pub fn at(&self, fraction: f64) -> f64 {
        let w = self.window() as f64;
        let x = fraction.clamp(0.0, 1.0) * w;
        let lo = x.floor() as usize;
        let value = |k: usize| if k == 0 { 0.0 } else { self.mass[k - 1] };
        if lo >= self.window() {
            return value(self.window());
        }
        let t = x - lo as f64;
        value(lo) + t * (value(lo + 1) - value(lo))
    }

    /// Largest deviation from the uniform diagonal.
    pub fn max_diagonal_gap(&self) -> f64 {
        self.mass
            .iter()
            .enumerate()
            .map(|(i, &m)| (m - self.fraction(i + 1)).abs())
            .fold(0.0, f64::max)
    }

    /// True when every interior point lies strictly above the diagonal.
    pub fn strictly_dominates_diagonal(&self) -> bool {
        let w = self.window();
        (1..w).all(|k| self.mass[k - 1] > self.fraction(k))
    }

    pub fn is_monotone(&self) -> bool {
        self.mass.first().is_none_or(|&m| m >= 0.0) && self.mass.windows(2).all(|p| p[1] >= p[0])
    }
}

/// Streaming accumulator for per-layer-group recency CDFs.
#[derive(Debug, Clone)]
pub struct RecencyCdf {
    window: usize,
    n_layers: usize,
    sums: [Vec<f64>; 3],
    counts: [usize; 3],
    scratch: Vec<f64>,
}

impl RecencyCdf {
    pub fn new(window: usize, n_layers: usize) -> Self {
        Self {
            window,
            n_layers,
            sums: [vec![0.0; window], vec![0.0; window], vec![0.0; window]],
            counts: [0; 3],
            scratch: Vec::with_capacity(window),
        }
    }

    /// Adds one row if its decode slice holds at least `window` tokens.
    pub fn add(&mut self, layer: usize, row: &AttentionRow) -> bool {
        let decode = row.decode_slice();
        if self.window == 0 || decode.len() < self.window {
            return false;
        }
        self.scratch.clear();
        self.scratch
            .extend_from_slice(&decode[decode.len() - self.window..]);
        self.scratch.sort_unstable_by(|a, b| b.total_cmp(a));
        let total: f64 = self.scratch.iter().sum();
        if total <= 0.0 {
            return false;
        }
        let g = LayerGroup::of(layer, self.n_layers) as usize;
        let mut acc = 0.0;
        for (sum, &w) in self.sums[g].iter_mut().zip(&self.scratch) {
            acc += w;
            *sum += acc / total;
        }
        self.counts[g] += 1;
        true
    }

    /// Mean curve per non-empty layer group.
    pub fn finish(&self) -> Result<Vec<CdfCurve>, MetricsError> {
        let curves: Vec<CdfCurve> = LayerGroup::ALL
            .iter()
            .filter(|g| self.counts[**g as usize] > 0)
            .map(|&g| {
                let n = self.counts[g as usize];
                let mut mass: Vec<f64> =
                    self.sums[g as usize].iter().map(|s| s / n as f64).collect();
                if let Some(last) = mass.last_mut() {
                    *last = 1.0;
                }
                CdfCurve {
                    group: g,
                    samples: n,
                    mass,
                }
            })
            .collect();
        if curves.is_empty() {
            return Err(MetricsError::RunTooShort {
                window: self.window,
            });
        }
        Ok(curves)
    }
}

/// Recency CDFs over `(layer, row)` pairs.
pub fn recency_cdf<'a>(
    rows: impl IntoIterator<Item = (usize, &'a AttentionRow)>,
    n_layers: usize,
    window: usize,
) -> Result<Vec<CdfCurve>, MetricsError> {
    let mut acc = RecencyCdf::new(window, n_layers);
    for (layer, row) in rows {
        acc.add(layer, row);
    }
    acc.finish()
}

/// The uniform-attention reference curve.
pub fn diagonal(window: usize) -> Vec<f64> {
    (1..=window).map(|k| k as f64 / window as f64).collect()
}

/// Fraction of (layer, hitter) pairs still cached at the end of a run.
/// Hitters inside the prefill pool always count as retained.
pub fn heavy_hitter_retention(
    survivors: &[Vec<usize>],
    prefill_len: usize,
    hitters: &[usize],
) -> Option<f64> {
    if hitters.is_empty() || survivors.is_empty() {
        return None;
    }
    let mut kept = 0usize;
    for layer in survivors {
        for &h in hitters {
            if h < prefill_len || layer.binary_search(&h).is_ok() {
                kept += 1;
            }
        }
    }
    Some(kept as f64 / (survivors.len() * hitters.len()) as f64)
}

/// One layer's eviction at one step, as stored in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer: usize,
    /// Total cache size after the append, before enforcement.
    pub cache_size_pre: usize,
    pub cache_size_post: usize,
    pub victim_positions: Vec<usize>,
    pub victim_scores: Vec<f64>,
    pub retained_mass: f64,
}

/// Mean Jaccard overlap between a policy's victims and the hindsight-optimal
/// victims for one layer of a trace.
///
/// The oracle evicts the same number of tokens, choosing those with the least
/// attention mass over the next `horizon` steps of the uncompressed trace
/// (ties to the older token). Decisions closer than `horizon` to the end of
/// the trace are skipped. Returns `Ok(None)` when the policy never evicted.
pub fn eviction_oracle_agreement(
    trace: &TraceFile,
    layer: usize,
    records: &[StepRecord],
    horizon: usize,
) -> Result<Option<f64>, MetricsError> {
    let n_layers = trace.header.n_layers;
    if layer >= n_layers {
        return Err(MetricsError::NoSuchLayer { layer, n_layers });
    }
    let steps = trace.header.n_steps;
    let m = trace.header.prefill_len;
    let mut alive: VecDeque<usize> = VecDeque::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut any_decision = false;
    let mut layer_records: Vec<&StepRecord> = records.iter().filter(|r| r.layer == layer).collect();
    layer_records.sort_by_key(|r| r.step);
    let mut next = layer_records.into_iter().peekable();

    for t in 1..=steps {
        alive.push_back(m + t - 1);
        let Some(rec) = next.next_if(|r| r.step == t) else {
            continue;
        };
        if rec.victim_positions.is_empty() {
            continue;
        }
        any_decision = true;
        if t + horizon <= steps && horizon > 0 {
            let future: Vec<f64> = alive
                .iter()
                .map(|&p| {
                    (t + 1..=t + horizon)
                        .map(|s| trace.weight(s, layer, p) as f64)
                        .sum()
                })
                .collect();
            let mut order: Vec<usize> = (0..alive.len()).collect();
            order.sort_by(|&a, &b| future[a].total_cmp(&future[b]).then(a.cmp(&b)));
            let mut oracle: Vec<usize> = order[..rec.victim_positions.len()]
                .iter()
                .map(|&i| alive[i])
                .collect();
            oracle.sort_unstable();
            total += jaccard(&rec.victim_positions, &oracle);
            counted += 1;
        }
        alive.retain(|p| rec.victim_positions.binary_search(p).is_err());
    }
    if !any_decision {
        return Ok(None);
    }
    if counted == 0 {
        return Err(MetricsError::HorizonExceedsTrace { horizon, steps });
    }
    Ok(Some(total / counted as f64))
}

/// Oracle agreement averaged over every layer that evicted.
pub fn mean_oracle_agreement(
    trace: &TraceFile,
    records: &[StepRecord],
    horizon: usize,
) -> Result<Option<f64>, MetricsError> {
    let mut scores = Vec::new();
    for layer in 0..trace.header.n_layers {
        if let Some(s) = eviction_oracle_agreement(trace, layer, records, horizon)? {
            scores.push(s);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// `|a ∩ b| / |a ∪ b|` for sorted, deduplicated slices.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    ClosedLoop,
    Replay,
}

/// Per-run timing, in nanoseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: usize,
    pub mean_step_nanos: f64,
    pub mean_policy_nanos: f64,
    pub median_policy_nanos: f64,
    /// Policy time as a fraction of total step time.
    pub policy_share: f64,
}

impl TimingSummary {
    pub fn from_samples(step_nanos: &[u64], policy_nanos: &[u64]) -> Self {
        let steps = step_nanos.len();
        if steps == 0 {
            return Self::default();
        }
        let mean = |v: &[u64]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
        let total_step: u64 = step_nanos.iter().sum();
        let total_policy: u64 = policy_nanos.iter().sum();
        Self {
            steps,
            mean_step_nanos: mean(step_nanos),
            mean_policy_nanos: mean(policy_nanos),
            median_policy_nanos: median(policy_nanos),
            policy_share: if total_step == 0 {
                0.0
            } else {
                total_policy as f64 / total_step as f64
            },
        }
    }
}

pub fn median(samples: &[u64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// Everything measured for one (policy, budget) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub label: String,
    pub run_id: String,
    pub policy: Policy,
    pub mode: RunMode,
    pub prefill_len: usize,
    pub n_layers: usize,
    pub steps: usize,
    /// Replay only: whether masked rows were rescaled to sum to one.
    pub renormalized: Option<bool>,
    pub notes: Vec<String>,
    /// `M + B_d` for bounded policies.
    pub capacity_limit: Option<usize>,
    pub max_total_size: usize,
    pub total_evictions: usize,
    pub mean_retained_mass: f64,
    pub min_retained_mass: f64,
    pub heavy_hitter_retention: Option<f64>,
    pub oracle_agreement: Option<f64>,
    pub cdf: Option<Vec<CdfCurve>>,
    pub timing: TimingSummary,
    /// Decode positions cached at the end, per layer.
    pub survivors: Vec<Vec<usize>>,
    pub records: Vec<StepRecord>,
}

/// Incrementally assembles a [`PolicyReport`].
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    policy: Policy,
    mode: RunMode,
    prefill_len: usize,
    n_layers: usize,
    renormalized: Option<bool>,
    cdf: Option<RecencyCdf>,
    records: Vec<StepRecord>,
    step_nanos: Vec<u64>,
    policy_nanos: Vec<u64>,
    max_total: usize,
    steps: usize,
}

impl ReportBuilder {
    pub fn new(policy: Policy, mode: RunMode, prefill_len: usize, n_layers: usize) -> Self {
        Self {
            policy,
            mode,
            prefill_len,
            n_layers,
            renormalized: None,
            cdf: None,
            records: Vec::new(),
            step_nanos: Vec::new(),
            policy_nanos: Vec::new(),
            max_total: 0,
            steps: 0,
        }
    }

    pub fn renormalized(mut self, on: bool) -> Self {
        self.renormalized = Some(on);
        self
    }

    /// Accumulate recency CDFs over the rows the policy observed.
    pub fn with_cdf(mut self, window: usize) -> Self {
        self.cdf = Some(RecencyCdf::new(window, self.n_layers));
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record_step(
        &mut self,
        step: usize,
        rows: &[AttentionRow],
        decisions: &[EvictionDecision],
        retained: &[f64],
        size_pre: &[usize],
        size_post: &[usize],
        policy_nanos: u64,
        step_nanos: u64,
    ) {
        self.steps = self.steps.max(step);
        for layer in 0..decisions.len() {
            if let Some(cdf) = self.cdf.as_mut() {
                cdf.add(layer, &rows[layer]);
            }
            self.max_total = self.max_total.max(size_post[layer]);
            self.records.push(StepRecord {
                step,
                layer,
                cache_size_pre: size_pre[layer],
                cache_size_post: size_post[layer],
                victim_positions: decisions[layer].victim_positions.clone(),
                victim_scores: decisions[layer].victim_scores(),
                retained_mass: retained[layer],
            });
        }
        self.policy_nanos.push(policy_nanos);
        self.step_nanos.push(step_nanos);
    }

    pub fn finish(self, survivors: Vec<Vec<usize>>, hitters: &[usize]) -> PolicyReport {
        let n = self.records.len().max(1) as f64;
        let mean_retained = self.records.iter().map(|r| r.retained_mass).sum::<f64>() / n;
        let min_retained = self
            .records
            .iter()
            .map(|r| r.retained_mass)
            .fold(1.0, f64::min);
        let mut notes = Vec::new();
        if self.policy.is_approximation() {
            notes.push(
                "ScopeSlide approximates SCOPE decode-phase selection; it is not a faithful reimplementation"
                    .to_string(),
            );
        }
        if let crate::policy::PolicyParams::MomentKv { momentum_alpha } = self.policy.params {
            if momentum_alpha == 1.0 {
                notes.push("alpha = 1.0: cumulative scores, equivalent to H2O with r = 0".into());
            }
        }
        if self.renormalized == Some(true) {
            notes.push(
                "open-loop replay: surviving weights rescaled to sum 1; a live model would redistribute attention differently"
                    .to_string(),
            );
        }
        let cdf = self.cdf.as_ref().and_then(|c| c.finish().ok());
        PolicyReport {
            label: self.policy.to_string(),
            run_id: self.policy.run_id(),
            capacity_limit: (self.policy.pool_budget() != usize::MAX)
                .then(|| self.prefill_len + self.policy.decode_budget),
            policy: self.policy,
            mode: self.mode,
            prefill_len: self.prefill_len,
            n_layers: self.n_layers,
            steps: self.steps,
            renormalized: self.renormalized,
            notes,
            max_total_size: self.max_total,
            total_evictions: self.records.iter().map(|r| r.victim_positions.len()).sum(),
            mean_retained_mass: mean_retained,
            min_retained_mass: min_retained,
            heavy_hitter_retention: heavy_hitter_retention(&survivors, self.prefill_len, hitters),
            oracle_agreement: None,
            cdf,
            timing: TimingSummary::from_samples(&self.step_nanos, &self.policy_nanos),
            survivors,
            records: self.records,
        }
    }
}
