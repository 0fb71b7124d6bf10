//! Decode-pool eviction policies.
//!
//! Every policy follows the same two-phase protocol per decode step: `observe`
//! the step's head-averaged attention row (updating per-slot scores held in an
//! [`ImportanceVector`]), then `select` victims once the decode pool exceeds
//! its budget. Policies hold no mutable state of their own; the scores live
//! next to the pool they describe, so one [`Policy`] value can drive any
//! number of layers concurrently.
//!
//! | policy          | score kept per slot                    | victims                                       |
//! |-----------------|----------------------------------------|-----------------------------------------------|
//! | `MomentKv`      | `I <- alpha * I + a`                   | overflow-many lowest scores, anywhere         |
//! | `H2o`           | `I <- I + a`                           | lowest scores outside the newest `r` tokens   |
//! | `ScopeSlide`    | `I <- a` (latest row only)             | lowest scores outside the newest `B - h`      |
//! | `StreamingSink` | none                                   | everything but sinks and the newest window    |
//! | `FullCache`     | none                                   | never evicts                                  |
//!
//! `ScopeSlide` is an approximation of SCOPE's decode-time sliding window built
//! from its published description only; reports label it accordingly.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CachePool, ImportanceVector, KvLayout, TokenSlot};
use crate::scalar::Scalar;

/// Row-sum tolerance for rows produced in single precision.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Default momentum factor when a config omits it.
pub const DEFAULT_MOMENTUM_ALPHA: f64 = 0.98;

/// Default attention-sink count for `StreamingSink`.
pub const DEFAULT_SINK_SIZE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("attention row has {got} weights, cache holds {expected} slots")]
    LengthMismatch { expected: usize, got: usize },
    #[error("overflow {overflow} exceeds decode pool size {len}")]
    OverflowTooLarge { overflow: usize, len: usize },
    #[error("budget {budget} too small: {reason}")]
    BudgetTooSmall { budget: usize, reason: String },
    #[error(
        "need to evict {overflow} tokens but only {evictable} are outside the protected window"
    )]
    NoEvictableTokens { overflow: usize, evictable: usize },
    #[error("momentum factor {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// One step's attention over the current cache, averaged over query heads.
///
/// `weights` covers the prefill pool first, then the decode pool, both in
/// slot order, and includes the token appended at this step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub weights: Vec<f64>,
    pub step: usize,
    pub prefill_len: usize,
}

impl AttentionRow {
    pub fn new(weights: Vec<f64>, step: usize, prefill_len: usize) -> Self {
        Self {
            weights,
            step,
            prefill_len,
        }
    }

    /// Averages per-head rows (all of equal length) into one row.
    pub fn from_heads<S: Scalar>(heads: &[Vec<S>], step: usize, prefill_len: usize) -> Self {
        let len = heads.first().map_or(0, Vec::len);
        let inv = S::one() / S::of(heads.len() as f64);
        let weights = (0..len)
            .map(|i| {
                let mut acc = S::zero();
                for head in heads {
                    acc += head[i];
                }
                (acc * inv).widen()
            })
            .collect();
        Self::new(weights, step, prefill_len)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// The part of the row over the decode pool.
    pub fn decode_slice(&self) -> &[f64] {
        &self.weights[self.prefill_len.min(self.weights.len())..]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_normalized(&self, tolerance: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0) && (self.sum() - 1.0).abs() <= tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "momentkv", alias = "moment-kv")]
    MomentKv,
    #[serde(alias = "streaming", alias = "streaming_llm")]
    StreamingSink,
    H2o,
    #[serde(alias = "scope")]
    ScopeSlide,
    #[serde(alias = "full")]
    FullCache,
}

/// Policy settings as written in a run config. Unset fields take defaults
/// relative to the decode budget when resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recency_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heavy_keep: Option<usize>,
    /// Overrides the run-level budget for this policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_budget: Option<usize>,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            momentum_alpha: None,
            sink_size: None,
            recency_window: None,
            heavy_keep: None,
            decode_budget: None,
        }
    }

    pub fn moment_kv(alpha: f64) -> Self {
        Self {
            momentum_alpha: Some(alpha),
            ..Self::new(PolicyKind::MomentKv)
        }
    }

    /// Fills defaults and validates against `decode_budget` (unless the
    /// config carries its own).
    pub fn resolve(&self, decode_budget: usize) -> Result<Policy, PolicyError> {
        let budget = self.decode_budget.unwrap_or(decode_budget);
        let params = match self.kind {
            PolicyKind::FullCache => PolicyParams::FullCache,
            PolicyKind::MomentKv => PolicyParams::MomentKv {
                momentum_alpha: self.momentum_alpha.unwrap_or(DEFAULT_MOMENTUM_ALPHA),
            },
            PolicyKind::StreamingSink => PolicyParams::StreamingSink {
                sink_size: self.sink_size.unwrap_or(DEFAULT_SINK_SIZE),
            },
            PolicyKind::H2o => PolicyParams::H2o {
                recency_window: self.recency_window.unwrap_or(budget / 8),
            },
            PolicyKind::ScopeSlide => PolicyParams::ScopeSlide {
                heavy_keep: self.heavy_keep.unwrap_or(budget / 2),
            },
        };
        Policy::new(params, budget)
    }
}

/// Fully resolved policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyParams {
    FullCache,
    MomentKv { momentum_alpha: f64 },
    StreamingSink { sink_size: usize },
    H2o { recency_window: usize },
    ScopeSlide { heavy_keep: usize },
}

/// A validated policy bound to its decode budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    #[serde(flatten)]
    pub params: PolicyParams,
    pub decode_budget: usize,
}

impl Policy {
    pub fn new(params: PolicyParams, decode_budget: usize) -> Result<Self, PolicyError> {
        if decode_budget == 0 {
            return Err(PolicyError::InvalidConfig(
                "decode_budget must be at least 1".into(),
            ));
        }
        match params {
            PolicyParams::MomentKv { momentum_alpha } => {
                if !(0.0..=1.0).contains(&momentum_alpha) {
                    return Err(PolicyError::InvalidAlpha(momentum_alpha));
                }
            }
            PolicyParams::H2o { recency_window } if recency_window >= decode_budget => {
                return Err(PolicyError::BudgetTooSmall {
                    budget: decode_budget,
                    reason: format!("recency window {recency_window} must be < budget"),
                });
            }
            PolicyParams::ScopeSlide { heavy_keep } if heavy_keep >= decode_budget => {
                return Err(PolicyError::BudgetTooSmall {
                    budget: decode_budget,
                    reason: format!("heavy_keep {heavy_keep} must be < budget"),
                });
            }
            _ => {}
        }
        Ok(Self {
            params,
            decode_budget,
        })
    }

    pub fn full_cache() -> Self {
        Self {
            params: PolicyParams::FullCache,
            decode_budget: usize::MAX,
        }
    }

    pub fn moment_kv(momentum_alpha: f64, decode_budget: usize) -> Result<Self, PolicyError> {
        Self::new(PolicyParams::MomentKv { momentum_alpha }, decode_budget)
    }

    pub fn kind(&self) -> PolicyKind {
        match self.params {
            PolicyParams::FullCache => PolicyKind::FullCache,
            PolicyParams::MomentKv { .. } => PolicyKind::MomentKv,
            PolicyParams::StreamingSink { .. } => PolicyKind::StreamingSink,
            PolicyParams::H2o { .. } => PolicyKind::H2o,
            PolicyParams::ScopeSlide { .. } => PolicyKind::ScopeSlide,
        }
    }

    /// Whether this policy is one of the unified baselines that the budget
    /// parity rule clamps to `M + B_d` total slots.
    pub fn is_unified_baseline(&self) -> bool {
        matches!(self.kind(), PolicyKind::StreamingSink | PolicyKind::H2o)
    }

    /// Whether this policy is a documented stand-in rather than a faithful
    /// reimplementation.
    pub fn is_approximation(&self) -> bool {
        self.kind() == PolicyKind::ScopeSlide
    }

    /// Decay applied to stored scores, recorded on the importance vector.
    pub fn score_decay(&self) -> f64 {
        match self.params {
            PolicyParams::MomentKv { momentum_alpha } => momentum_alpha,
            PolicyParams::H2o { .. } => 1.0,
            _ => 0.0,
        }
    }

    /// Effective decode budget of the pool this policy manages.
    pub fn pool_budget(&self) -> usize {
        match self.params {
            PolicyParams::FullCache => usize::MAX,
            _ => self.decode_budget,
        }
    }

    /// Filesystem-friendly identifier, e.g. `momentkv-a0.98-b512`.
    pub fn run_id(&self) -> String {
        let body = match self.params {
            PolicyParams::FullCache => return "fullcache".to_string(),
            PolicyParams::MomentKv { momentum_alpha } => format!("momentkv-a{momentum_alpha}"),
            PolicyParams::StreamingSink { sink_size } => format!("streaming-s{sink_size}"),
            PolicyParams::H2o { recency_window } => format!("h2o-r{recency_window}"),
            PolicyParams::ScopeSlide { heavy_keep } => format!("scopeslide-h{heavy_keep}"),
        };
        format!("{body}-b{}", self.decode_budget)
    }

    /// Updates per-slot scores from this step's row.
    pub fn observe(
        &self,
        importance: &mut ImportanceVector,
        row: &AttentionRow,
    ) -> Result<(), PolicyError> {
        match self.params {
            PolicyParams::FullCache | PolicyParams::StreamingSink { .. } => Ok(()),
            PolicyParams::MomentKv { .. } => momentkv_observe(importance, row),
            PolicyParams::H2o { .. } => h2o_observe(importance, row),
            PolicyParams::ScopeSlide { .. } => instantaneous_observe(importance, row),
        }
    }

    /// Nominates victims so that at most `decode_budget` decode slots remain.
    pub fn select(
        &self,
        importance: &ImportanceVector,
        decode_positions: &[usize],
        prefill_len: usize,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError> {
        let len = decode_positions.len();
        if importance.len() != len {
            return Err(CacheError::Misaligned {
                importance: importance.len(),
                decode: len,
            }
            .into());
        }
        let overflow = len.saturating_sub(self.pool_budget());
        let victims = match self.params {
            PolicyParams::FullCache => Vec::new(),
            PolicyParams::MomentKv { .. } => momentkv_select(importance.scores(), overflow)?,
            PolicyParams::H2o { recency_window } => {
                h2o_select(importance.scores(), overflow, recency_window)?
            }
            PolicyParams::StreamingSink { sink_size } => {
                streaming_select(decode_positions, prefill_len, sink_size, self.decode_budget)?
            }
            PolicyParams::ScopeSlide { heavy_keep } => {
                scope_slide_select(importance.scores(), self.decode_budget, heavy_keep)?
            }
        };
        debug_assert_eq!(victims.len(), overflow);
        Ok(EvictionDecision {
            step,
            victim_positions: victims.iter().map(|&i| decode_positions[i]).collect(),
            victim_indices: victims,
            scores_snapshot: importance.scores().to_vec(),
        })
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.params {
            PolicyParams::FullCache => write!(f, "FullCache"),
            PolicyParams::MomentKv { momentum_alpha } => {
                write!(
                    f,
                    "MomentKV(alpha={momentum_alpha}, B_d={})",
                    self.decode_budget
                )
            }
            PolicyParams::StreamingSink { sink_size } => {
                write!(
                    f,
                    "StreamingSink(s={sink_size}, B_d={})",
                    self.decode_budget
                )
            }
            PolicyParams::H2o { recency_window } => {
                write!(f, "H2O(r={recency_window}, B_d={})", self.decode_budget)
            }
            PolicyParams::ScopeSlide { heavy_keep } => write!(
                f,
                "ScopeSlide[approx](h={heavy_keep}, B_d={})",
                self.decode_budget
            ),
        }
    }
}

/// The victims chosen at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionDecision {
    pub step: usize,
    /// Strictly increasing decode-pool indices.
    pub victim_indices: Vec<usize>,
    pub victim_positions: Vec<usize>,
    /// Scores of every decode slot at decision time.
    pub scores_snapshot: Vec<f64>,
}

impl EvictionDecision {
    pub fn is_empty(&self) -> bool {
        self.victim_indices.is_empty()
    }

    pub fn victim_scores(&self) -> Vec<f64> {
        self.victim_indices
            .iter()
            .map(|&i| self.scores_snapshot[i])
            .collect()
    }
}

fn decode_weights<'r>(
    importance: &ImportanceVector,
    row: &'r AttentionRow,
) -> Result<&'r [f64], PolicyError> {
    let expected = row.prefill_len + importance.len();
    if row.len() != expected {
        return Err(PolicyError::LengthMismatch {
            expected,
            got: row.len(),
        });
    }
    Ok(row.decode_slice())
}

/// `I_i <- alpha * I_i + a_i` over the decode slice of `row`.
pub fn momentkv_observe(
    importance: &mut ImportanceVector,
    row: &AttentionRow,
) -> Result<(), PolicyError> {
    let weights = decode_weights(importance, row)?;
    let alpha = importance.momentum_alpha();
    for (score, &w) in importance.scores_mut().iter_mut().zip(weights) {
        *score = alpha * *score + w;
    }
    Ok(())
}

/// Cumulative attention without decay.
pub fn h2o_observe(
    importance: &mut ImportanceVector,
    row: &AttentionRow,
) -> Result<(), PolicyError> {
    let weights = decode_weights(importance, row)?;
    for (score, &w) in importance.scores_mut().iter_mut().zip(weights) {
        *score += w;
    }
    Ok(())
}

/// Replaces scores with the latest row's decode weights.
pub fn instantaneous_observe(
    importance: &mut ImportanceVector,
    row: &AttentionRow,
) -> Result<(), PolicyError> {
    let weights = decode_weights(importance, row)?;
    importance.scores_mut().copy_from_slice(weights);
    Ok(())
}

/// Ascending by score, then by index (older first).
fn score_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// The `k` lowest-scoring indices within `0..end`, returned ascending.
fn lowest_k(scores: &[f64], end: usize, k: usize) -> Vec<usize> {
    match k {
        0 => Vec::new(),
        1 => {
            let mut best = 0;
            for i in 1..end {
                if scores[i] < scores[best] {
                    best = i;
                }
            }
            vec![best]
        }
        _ => {
            let mut idx: Vec<usize> = (0..end).collect();
            let order = score_order(scores);
            if k < end {
                idx.select_nth_unstable_by(k - 1, &order);
                idx.truncate(k);
            }
            idx.sort_unstable();
            idx
        }
    }
}

/// Eviction by minimum importance: the `overflow` lowest scores, ties going
/// to the older (lower-index) slot.
pub fn momentkv_select(scores: &[f64], overflow: usize) -> Result<Vec<usize>, PolicyError> {
    if overflow > scores.len() {
        return Err(PolicyError::OverflowTooLarge {
            overflow,
            len: scores.len(),
        });
    }
    Ok(lowest_k(scores, scores.len(), overflow))
}

/// H2O victims: lowest cumulative scores outside the newest `recency_window`.
pub fn h2o_select(
    scores: &[f64],
    overflow: usize,
    recency_window: usize,
) -> Result<Vec<usize>, PolicyError> {
    if overflow > scores.len() {
        return Err(PolicyError::OverflowTooLarge {
            overflow,
            len: scores.len(),
        });
    }
    if overflow == 0 {
        return Ok(Vec::new());
    }
    let evictable = scores.len().saturating_sub(recency_window);
    if evictable < overflow {
        return Err(PolicyError::NoEvictableTokens {
            overflow,
            evictable,
        });
    }
    Ok(lowest_k(scores, evictable, overflow))
}

/// StreamingLLM-style victims: keep every sink (global position below
/// `sink_size`) and the newest decode tokens that fit in the remaining
/// budget; evict the middle.
///
/// Prefill tokens count as sinks, so when `prefill_len >= sink_size` this is
/// a pure sliding window over the decode pool.
pub fn streaming_select(
    decode_positions: &[usize],
    prefill_len: usize,
    sink_size: usize,
    budget: usize,
) -> Result<Vec<usize>, PolicyError> {
    let len = decode_positions.len();
    let decode_sinks = sink_size.saturating_sub(prefill_len);
    if decode_sinks > budget {
        return Err(PolicyError::BudgetTooSmall {
            budget,
            reason: format!("{decode_sinks} decode-side sinks do not fit"),
        });
    }
    if len <= budget {
        return Ok(Vec::new());
    }
    let sinks = decode_positions
        .iter()
        .take_while(|&&p| p < sink_size)
        .count();
    let window = budget - sinks;
    Ok((sinks..len - window).collect())
}

/// SCOPE-style sliding window: the newest `budget - heavy_keep` tokens are
/// kept unconditionally, plus the `heavy_keep` older tokens with the largest
/// instantaneous attention.
pub fn scope_slide_select(
    scores: &[f64],
    budget: usize,
    heavy_keep: usize,
) -> Result<Vec<usize>, PolicyError> {
    if heavy_keep >= budget {
        return Err(PolicyError::BudgetTooSmall {
            budget,
            reason: format!("heavy_keep {heavy_keep} must be < budget"),
        });
    }
    let len = scores.len();
    if len <= budget {
        return Ok(Vec::new());
    }
    let older = len - (budget - heavy_keep);
    Ok(lowest_k(scores, older, len - budget))
}

/// One layer's cache together with its scores and policy.
#[derive(Debug, Clone)]
pub struct LayerCache<S> {
    pool: CachePool<S>,
    importance: ImportanceVector,
    policy: Policy,
}

impl<S: Scalar> LayerCache<S> {
    pub fn new(layout: KvLayout, policy: Policy) -> Result<Self, PolicyError> {
        Ok(Self {
            pool: CachePool::new(layout, policy.pool_budget())?,
            importance: ImportanceVector::new(policy.score_decay())?,
            policy,
        })
    }

    pub fn pool(&self) -> &CachePool<S> {
        &self.pool
    }

    pub fn importance(&self) -> &ImportanceVector {
        &self.importance
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn prefill(&mut self, slots: Vec<TokenSlot<S>>) -> Result<(), PolicyError> {
        Ok(self.pool.append_prefill(slots)?)
    }

    pub fn append(&mut self, slot: TokenSlot<S>) -> Result<(), PolicyError> {
        Ok(self.pool.append_decode(&mut self.importance, slot)?)
    }

    pub fn observe(&mut self, row: &AttentionRow) -> Result<(), PolicyError> {
        let expected = self.pool.total_size();
        if row.len() != expected {
            return Err(PolicyError::LengthMismatch {
                expected,
                got: row.len(),
            });
        }
        self.policy.observe(&mut self.importance, row)
    }

    pub fn select(&self, step: usize) -> Result<EvictionDecision, PolicyError> {
        let positions = self.pool.decode_positions();
        self.policy
            .select(&self.importance, &positions, self.pool.prefill_len(), step)
    }

    pub fn apply(&mut self, decision: &EvictionDecision) -> Result<(), PolicyError> {
        self.pool
            .evict_indices(&mut self.importance, &decision.victim_indices)?;
        Ok(())
    }

    /// Selects and applies victims for `step`.
    pub fn enforce(&mut self, step: usize) -> Result<EvictionDecision, PolicyError> {
        let decision = self.select(step)?;
        self.apply(&decision)?;
        Ok(decision)
    }
}
