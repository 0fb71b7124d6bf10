//! Attention traces: the ATTRC01 file format, synthetic generators, toy-model
//! export and open-loop replay.
//!
//! A trace always records attention over the full, uncompressed cache: the
//! row at step `t` has exactly `M + t` weights. Any policy can then be
//! replayed against the same file.

mod format;
mod generate;
mod replay;

pub use format::{
    read_trace, read_trace_from, write_trace, write_trace_to, MAGIC, READ_SUM_TOLERANCE,
};
pub use generate::{
    gen_heavy_hitter_trace, gen_recency_burst_trace, Dip, HeavyHitterParams, Hitter,
    RecencyBurstParams, GENERATOR_SUM_TOLERANCE,
};
pub use replay::{replay, ReplayOptions, ReplayStep, Replayer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecodeSession, ModelError, ToyModel};
use crate::policy::{AttentionRow, Policy};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic: expected ATTRC01")]
    BadMagic,
    #[error("trace truncated while reading {0}")]
    TruncatedTrace(String),
    #[error("step {step} layer {layer} head {head}: row sums to {sum}, outside 1 +/- {tolerance}")]
    NormalizationViolation {
        step: usize,
        layer: usize,
        head: usize,
        sum: f64,
        tolerance: f64,
    },
    #[error("step {step} layer {layer}: row has {got} weights, expected {expected}")]
    RowLength {
        step: usize,
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid header: {0}")]
    BadHeader(String),
    #[error("{0} unexpected bytes after last step")]
    TrailingBytes(u64),
    #[error("invalid dip window: {0}")]
    InvalidDipWindow(String),
    #[error("invalid heavy hitter: {0}")]
    InvalidHitter(String),
    #[error("concentration {0} outside (0, 1]")]
    BadConcentration(f64),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("replay: {0}")]
    Replay(#[from] crate::policy::PolicyError),
    #[error("toy model: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Captured,
    Synthetic,
    ToyModel,
}

impl TraceSource {
    pub fn code(self) -> u8 {
        match self {
            TraceSource::Captured => 0,
            TraceSource::Synthetic => 1,
            TraceSource::ToyModel => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TraceSource::Captured),
            1 => Some(TraceSource::Synthetic),
            2 => Some(TraceSource::ToyModel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub prefill_len: usize,
    pub n_steps: usize,
    pub n_layers: usize,
    /// Rows stored per layer per step; 1 when pre-averaged.
    pub n_heads: usize,
    pub head_averaged: bool,
    pub source: TraceSource,
    pub model_tag: String,
}

impl TraceHeader {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::BadHeader(m.to_string()));
        if self.prefill_len == 0 {
            return bad("prefill_len must be >= 1");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1");
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("n_layers and n_heads must be >= 1");
        }
        if self.head_averaged && self.n_heads != 1 {
            return bad("head-averaged traces store n_heads = 1");
        }
        Ok(())
    }

    /// Length of every row at 1-based step `t`.
    pub fn row_len(&self, step: usize) -> usize {
        self.prefill_len + step
    }
}

/// Rows for one decode step: `rows[layer][head][position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub rows: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
}

impl TraceFile {
    /// Head-averaged row for 1-based `step` and `layer`.
    pub fn row(&self, step: usize, layer: usize) -> AttentionRow {
        AttentionRow::from_heads(
            &self.steps[step - 1].rows[layer],
            step,
            self.header.prefill_len,
        )
    }

    /// Head-averaged weight of one position.
    pub fn weight(&self, step: usize, layer: usize, position: usize) -> f32 {
        let heads = &self.steps[step - 1].rows[layer];
        if heads.len() == 1 {
            return heads[0][position];
        }
        heads.iter().map(|h| h[position]).sum::<f32>() / heads.len() as f32
    }

    /// Checks that the body agrees with the header.
    pub fn check_shape(&self) -> Result<(), TraceError> {
        let h = &self.header;
        h.validate()?;
        if self.steps.len() != h.n_steps {
            return Err(TraceError::BadHeader(format!(
                "header says {} steps, body has {}",
                h.n_steps,
                self.steps.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.step != i + 1 {
                return Err(TraceError::BadHeader(format!(
                    "step record {} carries step number {}",
                    i + 1,
                    step.step
                )));
            }
            if step.rows.len() != h.n_layers {
                return Err(TraceError::BadHeader(format!(
                    "step {} has {} layers, header says {}",
                    step.step,
                    step.rows.len(),
                    h.n_layers
                )));
            }
            for (layer, heads) in step.rows.iter().enumerate() {
                if heads.len() != h.n_heads {
                    return Err(TraceError::BadHeader(format!(
                        "step {} layer {layer} has {} heads, header says {}",
                        step.step,
                        heads.len(),
                        h.n_heads
                    )));
                }
                for row in heads {
                    if row.len() != h.row_len(step.step) {
                        return Err(TraceError::RowLength {
                            step: step.step,
                            layer,
                            expected: h.row_len(step.step),
                            got: row.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks every stored row sums to one within `tolerance`.
    pub fn check_normalized(&self, tolerance: f64) -> Result<(), TraceError> {
        for step in &self.steps {
            for (layer, heads) in step.rows.iter().enumerate() {
                for (head, row) in heads.iter().enumerate() {
                    check_row(row, step.step, layer, head, tolerance)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_row(
    row: &[f32],
    step: usize,
    layer: usize,
    head: usize,
    tolerance: f64,
) -> Result<(), TraceError> {
    let sum: f64 = row.iter().map(|&w| w as f64).sum();
    let finite_nonneg = row.iter().all(|w| w.is_finite() && *w >= 0.0);
    let within = (sum - 1.0).abs() <= tolerance;
    if !finite_nonneg || !within {
        return Err(TraceError::NormalizationViolation {
            step,
            layer,
            head,
            sum,
            tolerance,
        });
    }
    Ok(())
}

/// Runs the toy model with a full cache for `steps` decode steps and records
/// its attention as a trace. With `per_head`, rows are stored per head.
pub fn toy_model_trace<S: Scalar>(
    model: &ToyModel<S>,
    prompt: &[usize],
    steps: usize,
    per_head: bool,
) -> Result<TraceFile, TraceError> {
    if steps == 0 {
        return Err(TraceError::InvalidParams("steps must be >= 1".into()));
    }
    let spec = *model.spec();
    let mut session =
        DecodeSession::start(model, prompt, Policy::full_cache())?.record_heads(per_head);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = session.step()?;
        let rows = if per_head {
            s.raw_head_attention
                .expect("head recording enabled")
                .into_iter()
                .map(|heads| {
                    heads
                        .into_iter()
                        .map(|h| h.into_iter().map(Scalar::narrow).collect())
                        .collect()
                })
                .collect()
        } else {
            s.attention_rows
                .iter()
                .map(|r| vec![r.weights.iter().map(|&w| w as f32).collect()])
                .collect()
        };
        out.push(TraceStep { step: s.step, rows });
    }
    Ok(TraceFile {
        header: TraceHeader {
            prefill_len: prompt.len(),
            n_steps: steps,
            n_layers: spec.n_layers,
            n_heads: if per_head { spec.n_heads } else { 1 },
            head_averaged: !per_head,
            source: TraceSource::ToyModel,
            model_tag: format!(
                "toy-{}:d{}h{}l{}v{}s{}",
                S::NAME,
                spec.d_model,
                spec.n_heads,
                spec.n_layers,
                spec.vocab_size,
                spec.seed
            ),
        },
        steps: out,
    })
}
