//! Open-loop replay of a recorded trace against an eviction policy.
//!
//! The trace fixes attention over the uncompressed cache, so replay only
//! tracks which positions each layer still holds. At step `t` the row fed to
//! the policy is the trace row restricted to the surviving positions,
//! optionally rescaled to sum to one. When nothing has been evicted the trace
//! row is passed through untouched.

use std::time::Instant;

use crate::cache::{KvLayout, Phase, TokenSlot};
use crate::metrics::{mean_oracle_agreement, PolicyReport, ReportBuilder, RunMode};
use crate::policy::{AttentionRow, EvictionDecision, LayerCache, Policy};

use super::{TraceError, TraceFile};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOptions {
    /// Rescale masked rows so they sum to one.
    pub renormalize: bool,
    /// Recency-CDF window; `None` skips the CDF.
    pub cdf_window: Option<usize>,
    /// Oracle look-ahead; `None` skips oracle agreement.
    pub oracle_horizon: Option<usize>,
    /// Positions whose survival is reported as heavy-hitter retention.
    pub hitters: Vec<usize>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            renormalize: true,
            cdf_window: None,
            oracle_horizon: None,
            hitters: Vec::new(),
        }
    }
}

/// What one replayed step did across all layers.
#[derive(Debug, Clone)]
pub struct ReplayStep {
    pub step: usize,
    /// Rows as the policy saw them, over the cache before enforcement.
    pub rows_fed: Vec<AttentionRow>,
    pub decisions: Vec<EvictionDecision>,
    /// Share of the full trace row held by the cache after enforcement.
    pub retained_mass: Vec<f64>,
    pub cache_size_pre: Vec<usize>,
    pub cache_size_post: Vec<usize>,
    pub policy_nanos: u64,
    pub step_nanos: u64,
}

/// Steps a trace through metadata-only layer caches.
#[derive(Debug, Clone)]
pub struct Replayer<'t> {
    trace: &'t TraceFile,
    layers: Vec<LayerCache<f32>>,
    renormalize: bool,
    step: usize,
}

impl<'t> Replayer<'t> {
    pub fn new(
        trace: &'t TraceFile,
        policy: Policy,
        renormalize: bool,
    ) -> Result<Self, TraceError> {
        Self::new_per_layer(trace, &vec![policy; trace.header.n_layers], renormalize)
    }

    pub fn new_per_layer(
        trace: &'t TraceFile,
        policies: &[Policy],
        renormalize: bool,
    ) -> Result<Self, TraceError> {
        trace.check_shape()?;
        let h = &trace.header;
        if policies.len() != h.n_layers {
            return Err(TraceError::InvalidParams(format!(
                "{} policies for {} layers",
                policies.len(),
                h.n_layers
            )));
        }
        let mut layers = Vec::with_capacity(h.n_layers);
        for policy in policies {
            let mut layer = LayerCache::new(KvLayout::metadata_only(), *policy)?;
            layer.prefill(
                (0..h.prefill_len)
                    .map(|p| TokenSlot::marker(p, Phase::Prefill))
                    .collect(),
            )?;
            layers.push(layer);
        }
        Ok(Self {
            trace,
            layers,
            renormalize,
            step: 0,
        })
    }

    pub fn layers(&self) -> &[LayerCache<f32>] {
        &self.layers
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.trace.header.n_steps
    }

    /// Replays the next step, or returns `None` at the end of the trace.
    pub fn step(&mut self) -> Result<Option<ReplayStep>, TraceError> {
        if self.is_finished() {
            return Ok(None);
        }
        let started = Instant::now();
        self.step += 1;
        let t = self.step;
        let m = self.trace.header.prefill_len;
        let n_layers = self.layers.len();
        let mut out = ReplayStep {
            step: t,
            rows_fed: Vec::with_capacity(n_layers),
            decisions: Vec::with_capacity(n_layers),
            retained_mass: Vec::with_capacity(n_layers),
            cache_size_pre: Vec::with_capacity(n_layers),
            cache_size_post: Vec::with_capacity(n_layers),
            policy_nanos: 0,
            step_nanos: 0,
        };

        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.append(TokenSlot::marker(m + t - 1, Phase::Decode))?;
            let full = self.trace.row(t, l);
            let row = if layer.pool().total_size() == full.len() {
                full.clone()
            } else {
                let mut weights: Vec<f64> = full.weights[..m].to_vec();
                weights.extend(
                    layer
                        .pool()
                        .decode()
                        .iter()
                        .map(|s| full.weights[s.global_position()]),
                );
                if self.renormalize {
                    let sum: f64 = weights.iter().sum();
                    if sum > 0.0 {
                        weights.iter_mut().for_each(|w| *w /= sum);
                    }
                }
                AttentionRow::new(weights, t, m)
            };
            out.cache_size_pre.push(layer.pool().total_size());

            let t0 = Instant::now();
            layer.observe(&row)?;
            let decision = layer.enforce(t)?;
            out.policy_nanos += t0.elapsed().as_nanos() as u64;

            let pool = layer.pool();
            out.cache_size_post.push(pool.total_size());
            out.retained_mass.push(if pool.total_size() == full.len() {
                1.0
            } else {
                let total = full.sum();
                let kept = full.weights[..m].iter().sum::<f64>()
                    + pool
                        .decode()
                        .iter()
                        .map(|s| full.weights[s.global_position()])
                        .sum::<f64>();
                if total > 0.0 {
                    (kept / total).clamp(0.0, 1.0)
                } else {
                    1.0
                }
            });
            out.rows_fed.push(row);
            out.decisions.push(decision);
        }
        out.step_nanos = started.elapsed().as_nanos() as u64;
        Ok(Some(out))
    }

    /// Decode positions still cached, per layer.
    pub fn survivors(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| l.pool().decode_positions())
            .collect()
    }
}

/// Replays the whole trace under one policy and summarizes the run.
pub fn replay(
    trace: &TraceFile,
    policy: Policy,
    opts: &ReplayOptions,
) -> Result<PolicyReport, TraceError> {
    let h = &trace.header;
    let mut replayer = Replayer::new(trace, policy, opts.renormalize)?;
    let mut builder = ReportBuilder::new(policy, RunMode::Replay, h.prefill_len, h.n_layers)
        .renormalized(opts.renormalize);
    if let Some(w) = opts.cdf_window {
        builder = builder.with_cdf(w);
    }
    while let Some(s) = replayer.step()? {
        builder.record_step(
            s.step,
            &s.rows_fed,
            &s.decisions,
            &s.retained_mass,
            &s.cache_size_pre,
            &s.cache_size_post,
            s.policy_nanos,
            s.step_nanos,
        );
    }
    let mut report = builder.finish(replayer.survivors(), &opts.hitters);
    if let Some(horizon) = opts.oracle_horizon {
        report.oracle_agreement = mean_oracle_agreement(trace, &report.records, horizon)
            .map_err(|e| TraceError::InvalidParams(e.to_string()))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{gen_heavy_hitter_trace, HeavyHitterParams, Hitter};

    fn trace() -> TraceFile {
        let mut p = HeavyHitterParams::new(4, 40);
        p.noise = 0.3;
        p.seed = 5;
        p.hitters = vec![Hitter {
            position: 6,
            base_mass: 0.3,
        }];
        gen_heavy_hitter_trace(&p).unwrap()
    }

    #[test]
    fn full_cache_passes_rows_through() {
        let tr = trace();
        let mut r = Replayer::new(&tr, Policy::full_cache(), true).unwrap();
        while let Some(s) = r.step().unwrap() {
            assert_eq!(s.rows_fed[0], tr.row(s.step, 0));
            assert_eq!(s.retained_mass[0], 1.0);
            assert!(s.decisions[0].is_empty());
        }
        assert_eq!(r.survivors()[0].len(), 40);
    }

    #[test]
    fn bounded_replay_respects_budget_and_keeps_hitter() {
        let tr = trace();
        let opts = ReplayOptions {
            hitters: vec![6],
            ..ReplayOptions::default()
        };
        let report = replay(&tr, Policy::moment_kv(0.9, 8).unwrap(), &opts).unwrap();
        assert_eq!(report.max_total_size, 4 + 8);
        assert_eq!(report.total_evictions, 40 - 8);
        assert_eq!(report.heavy_hitter_retention, Some(1.0));
        assert!(report.min_retained_mass < 1.0);
    }

    #[test]
    fn masked_rows_are_renormalized_only_on_request() {
        let tr = trace();
        for renorm in [true, false] {
            let mut r = Replayer::new(&tr, Policy::moment_kv(0.5, 4).unwrap(), renorm).unwrap();
            while let Some(s) = r.step().unwrap() {
                let sum = s.rows_fed[0].sum();
                if s.step > 5 && !renorm {
                    assert!(sum < 1.0 - 1e-6);
                } else {
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn policy_count_must_match_layers() {
        let tr = trace();
        assert!(matches!(
            Replayer::new_per_layer(&tr, &[Policy::full_cache(); 2], true),
            Err(TraceError::InvalidParams(_))
        ));
    }
}
