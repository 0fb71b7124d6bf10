//! Deterministic toy transformer decoder for closed-loop cache experiments.
//!
//! Weights are drawn from a seeded ChaCha stream and never trained. Each
//! layer is a pre-norm residual block (RMS norm, multi-head attention, ReLU
//! feed-forward); the unembedding is tied to the token embedding. Attention at
//! every decode step runs over whatever the layer's [`LayerCache`] currently
//! holds, so evictions feed back into every later logit.
//!
//! Per decode step and per layer the order is fixed: project Q/K/V, append
//! the new KV slot with a zero score, attend over prefill + decode slots
//! (including the new one), head-average, update scores on the decode slice,
//! then enforce the budget.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{KvLayout, Phase, TokenSlot};
use crate::metrics::retained_mass;
use crate::policy::{AttentionRow, EvictionDecision, LayerCache, Policy, PolicyError};
use crate::scalar::Scalar;

const RMS_EPS: f64 = 1e-6;
const FF_MULT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: usize, vocab_size: usize },
    #[error("expected {expected} per-layer policies, got {got}")]
    PolicyCount { expected: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Shape and seed of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layout(&self) -> KvLayout {
        KvLayout::new(self.n_heads, self.head_dim())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 {
            return bad("d_model and n_heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for sinusoidal positions");
        }
        if self.n_layers == 0 || self.vocab_size == 0 {
            return bad("n_layers and vocab_size must be positive");
        }
        Ok(())
    }
}

/// Sinusoidal encoding of an absolute position:
/// `pe[2i] = sin(p / 10000^(2i/d))`, `pe[2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encode(position: usize, d_model: usize) -> Vec<f64> {
    let p = position as f64;
    (0..d_model)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = p / 10000f64.powf(2.0 * pair / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Block<S> {
    wq: Vec<S>,
    wk: Vec<S>,
    wv: Vec<S>,
    wo: Vec<S>,
    w1: Vec<S>,
    w2: Vec<S>,
}

/// Seeded random-weight decoder.
#[derive(Debug, Clone)]
pub struct ToyModel<S> {
    spec: ModelSpec,
    embedding: Vec<S>,
    blocks: Vec<Block<S>>,
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, len: usize, half_width: f64) -> Vec<S> {
    (0..len)
        .map(|_| S::of((2.0 * rng.random::<f64>() - 1.0) * half_width))
        .collect()
}

fn matvec<S: Scalar>(x: &[S], w: &[S], d_out: usize) -> Vec<S> {
    let mut out = vec![S::zero(); d_out];
    for (xi, row) in x.iter().zip(w.chunks_exact(d_out)) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += *xi * wij;
        }
    }
    out
}

fn rms_norm<S: Scalar>(x: &[S]) -> Vec<S> {
    let ms = x.iter().map(|&v| v * v).sum::<S>() / S::of(x.len() as f64);
    let inv = S::one() / (ms + S::of(RMS_EPS)).sqrt();
    x.iter().map(|&v| v * inv).collect()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// In-place numerically stable softmax.
fn softmax<S: Scalar>(scores: &mut [S]) {
    let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// A reproducible prompt of `len` token ids below `vocab_size`.
///
/// Drawn from stream 1 of the seed's ChaCha generator, so it never overlaps
/// the stream used for model weights.
pub fn seeded_prompt(vocab_size: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..len).map(|_| rng.random_range(0..vocab_size)).collect()
}

/// Greedy choice, smallest token id on ties.
pub fn argmax<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Attention of one query over a sequence of slots. Returns the concatenated
/// head outputs and the per-head weights.
fn attend<'a, S: Scalar>(
    q: &[S],
    slots: impl Iterator<Item = &'a TokenSlot<S>> + Clone,
    n_heads: usize,
    head_dim: usize,
) -> (Vec<S>, Vec<Vec<S>>) {
    let scale = S::one() / S::of(head_dim as f64).sqrt();
    let mut out = vec![S::zero(); n_heads * head_dim];
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = &q[h * head_dim..(h + 1) * head_dim];
        let mut w: Vec<S> = slots
            .clone()
            .map(|s| dot(qh, s.key_head(h, head_dim)) * scale)
            .collect();
        softmax(&mut w);
        let oh = &mut out[h * head_dim..(h + 1) * head_dim];
        for (&wi, slot) in w.iter().zip(slots.clone()) {
            for (o, &v) in oh.iter_mut().zip(slot.value_head(h, head_dim)) {
                *o += wi * v;
            }
        }
        heads.push(w);
    }
    (out, heads)
}

/// Everything the prompt pass produces.
#[derive(Debug, Clone)]
pub struct PrefillOutput<S> {
    /// Prefill slots per layer, positions `0..M`.
    pub slots: Vec<Vec<TokenSlot<S>>>,
    /// Final hidden state of the last prompt token.
    pub hidden: Vec<S>,
    pub logits: Vec<S>,
    /// Head-averaged attention of the last prompt token, per layer.
    pub last_attention: Vec<AttentionRow>,
}

impl<S: Scalar> ToyModel<S> {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let d = spec.d_model;
        let ff = FF_MULT * d;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let proj = (3.0 / d as f64).sqrt();
        let embedding = uniform(&mut rng, spec.vocab_size * d, 3f64.sqrt());
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                wq: uniform(&mut rng, d * d, proj),
                wk: uniform(&mut rng, d * d, proj),
                wv: uniform(&mut rng, d * d, proj),
                wo: uniform(&mut rng, d * d, 0.5 * proj),
                w1: uniform(&mut rng, d * ff, proj),
                w2: uniform(&mut rng, ff * d, 0.5 * (3.0 / ff as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            spec,
            embedding,
            blocks,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_token(&self, token: usize) -> Result<(), ModelError> {
        if token >= self.spec.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                token,
                vocab_size: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, token: usize, position: usize) -> Vec<S> {
        let d = self.spec.d_model;
        self.embedding[token * d..(token + 1) * d]
            .iter()
            .zip(positional_encode(position, d))
            .map(|(&e, p)| e + S::of(p))
            .collect()
    }

    fn qkv(&self, layer: usize, x: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
        let b = &self.blocks[layer];
        let d = self.spec.d_model;
        let h = rms_norm(x);
        (
            matvec(&h, &b.wq, d),
            matvec(&h, &b.wk, d),
            matvec(&h, &b.wv, d),
        )
    }

    /// Residual updates after attention: output projection then feed-forward.
    fn finish_block(&self, layer: usize, x: &mut [S], attn: &[S]) {
        let b = &self.blocks[layer];
        let d = self.spec.d_model;
        for (xi, o) in x.iter_mut().zip(matvec(attn, &b.wo, d)) {
            *xi += o;
        }
        let mut hidden = matvec(&rms_norm(x), &b.w1, FF_MULT * d);
        for v in hidden.iter_mut() {
            *v = v.max(S::zero());
        }
        for (xi, o) in x.iter_mut().zip(matvec(&hidden, &b.w2, d)) {
            *xi += o;
        }
    }

    pub fn logits(&self, hidden: &[S]) -> Vec<S> {
        let h = rms_norm(hidden);
        self.embedding
            .chunks_exact(self.spec.d_model)
            .map(|e| dot(&h, e))
            .collect()
    }

    /// Processes the whole prompt causally and returns per-layer prefill slots.
    pub fn prefill_forward(&self, prompt: &[usize]) -> Result<PrefillOutput<S>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        for &t in prompt {
            self.check_token(t)?;
        }
        let m = prompt.len();
        let (n_heads, head_dim) = (self.spec.n_heads, self.spec.head_dim());
        let mut xs: Vec<Vec<S>> = prompt
            .iter()
            .enumerate()
            .map(|(p, &t)| self.embed(t, p))
            .collect();
        let mut slots = Vec::with_capacity(self.spec.n_layers);
        let mut last_attention = Vec::with_capacity(self.spec.n_layers);
        for layer in 0..self.spec.n_layers {
            let mut layer_slots: Vec<TokenSlot<S>> = Vec::with_capacity(m);
            let mut queries = Vec::with_capacity(m);
            for (p, x) in xs.iter().enumerate() {
                let (q, k, v) = self.qkv(layer, x);
                layer_slots.push(TokenSlot::new(p, k, v, Phase::Prefill));
                queries.push(q);
            }
            for (p, (x, q)) in xs.iter_mut().zip(&queries).enumerate() {
                let (attn, heads) = attend(q, layer_slots[..=p].iter(), n_heads, head_dim);
                if p == m - 1 {
                    last_attention.push(AttentionRow::from_heads(&heads, 0, m));
                }
                self.finish_block(layer, x, &attn);
            }
            slots.push(layer_slots);
        }
        let hidden = xs.pop().expect("non-empty prompt");
        let logits = self.logits(&hidden);
        Ok(PrefillOutput {
            slots,
            hidden,
            logits,
            last_attention,
        })
    }
}

/// Result of one closed-loop decode step across all layers.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub step: usize,
    /// Token fed into this step.
    pub input_token: usize,
    pub logits: Vec<S>,
    /// Greedy successor, fed into the next step.
    pub next_token: usize,
    /// One head-averaged row per layer, over that layer's cache before
    /// enforcement (prefill, then decode, including this step's token).
    pub attention_rows: Vec<AttentionRow>,
    /// Per layer, per head weights; only when recording is enabled.
    pub raw_head_attention: Option<Vec<Vec<Vec<S>>>>,
    pub decisions: Vec<EvictionDecision>,
    pub retained_mass: Vec<f64>,
    pub cache_size_pre: Vec<usize>,
    pub cache_size_post: Vec<usize>,
    /// Time spent in policy observe + select + evict, summed over layers.
    pub policy_nanos: u64,
    pub step_nanos: u64,
}

/// A running generation: model, per-layer caches, and the next input token.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m, S> {
    model: &'m ToyModel<S>,
    layers: Vec<LayerCache<S>>,
    prefill_len: usize,
    step: usize,
    next_input: usize,
    record_heads: bool,
}

impl<'m, S: Scalar> DecodeSession<'m, S> {
    /// Prefills with the same policy on every layer.
    pub fn start(
        model: &'m ToyModel<S>,
        prompt: &[usize],
        policy: Policy,
    ) -> Result<Self, ModelError> {
        Self::start_per_layer(model, prompt, &vec![policy; model.spec.n_layers])
    }

    pub fn start_per_layer(
        model: &'m ToyModel<S>,
        prompt: &[usize],
        policies: &[Policy],
    ) -> Result<Self, ModelError> {
        if policies.len() != model.spec.n_layers {
            return Err(ModelError::PolicyCount {
                expected: model.spec.n_layers,
                got: policies.len(),
            });
        }
        let prefill = model.prefill_forward(prompt)?;
        let mut layers = Vec::with_capacity(policies.len());
        for (slots, policy) in prefill.slots.into_iter().zip(policies) {
            let mut layer = LayerCache::new(model.spec.layout(), *policy)?;
            layer.prefill(slots)?;
            layers.push(layer);
        }
        Ok(Self {
            model,
            layers,
            prefill_len: prompt.len(),
            step: 0,
            next_input: argmax(&prefill.logits),
            record_heads: false,
        })
    }

    /// Keep per-head attention in each [`StepOutput`].
    pub fn record_heads(mut self, on: bool) -> Self {
        self.record_heads = on;
        self
    }

    pub fn layers(&self) -> &[LayerCache<S>] {
        &self.layers
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn next_input(&self) -> usize {
        self.next_input
    }

    /// Runs decode step `t = steps_done() + 1`.
    pub fn step(&mut self) -> Result<StepOutput<S>, ModelError> {
        let started = Instant::now();
        self.step += 1;
        let step = self.step;
        let token = self.next_input;
        let position = self.prefill_len + step - 1;
        let spec = self.model.spec;
        let (n_heads, head_dim) = (spec.n_heads, spec.head_dim());
        let n_layers = spec.n_layers;

        let mut x = self.model.embed(token, position);
        let mut rows = Vec::with_capacity(n_layers);
        let mut raw = self.record_heads.then(|| Vec::with_capacity(n_layers));
        let mut decisions = Vec::with_capacity(n_layers);
        let mut retained = Vec::with_capacity(n_layers);
        let mut size_pre = Vec::with_capacity(n_layers);
        let mut size_post = Vec::with_capacity(n_layers);
        let mut policy_nanos = 0u64;

        for (l, layer) in self.layers.iter_mut().enumerate() {
            let (q, k, v) = self.model.qkv(l, &x);
            layer.append(TokenSlot::new(position, k, v, Phase::Decode))?;
            let (attn, heads) = attend(&q, layer.pool().iter_slots(), n_heads, head_dim);
            let row = AttentionRow::from_heads(&heads, step, self.prefill_len);
            size_pre.push(layer.pool().total_size());

            let t0 = Instant::now();
            layer.observe(&row)?;
            let decision = layer.enforce(step)?;
            policy_nanos += t0.elapsed().as_nanos() as u64;

            retained.push(step_retained_mass(&row, &decision));
            size_post.push(layer.pool().total_size());
            self.model.finish_block(l, &mut x, &attn);
            rows.push(row);
            if let Some(raw) = raw.as_mut() {
                raw.push(heads);
            }
            decisions.push(decision);
        }

        let logits = self.model.logits(&x);
        self.next_input = argmax(&logits);
        Ok(StepOutput {
            step,
            input_token: token,
            next_token: self.next_input,
            logits,
            attention_rows: rows,
            raw_head_attention: raw,
            decisions,
            retained_mass: retained,
            cache_size_pre: size_pre,
            cache_size_post: size_post,
            policy_nanos,
            step_nanos: started.elapsed().as_nanos() as u64,
        })
    }
}

/// Retained fraction of `row` after removing this step's victims.
fn step_retained_mass(row: &AttentionRow, decision: &EvictionDecision) -> f64 {
    if decision.is_empty() {
        return 1.0;
    }
    let mut victims = decision
        .victim_indices
        .iter()
        .map(|&i| row.prefill_len + i)
        .peekable();
    let surviving: Vec<usize> = (0..row.len())
        .filter(|i| {
            if victims.peek() == Some(i) {
                victims.next();
                false
            } else {
                true
            }
        })
        .collect();
    retained_mass(&row.weights, &surviving)
}
