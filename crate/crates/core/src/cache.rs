//! Two-pool KV cache: a frozen prefill pool plus a budget-bounded decode pool.
//!
//! The pool only executes appends and evictions. Which decode slots to drop
//! is decided by a policy (see [`crate::policy`]); the pool guarantees that
//! the prefill pool is never touched and that the importance vector stays
//! aligned index-for-index with the decode pool.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("prefill pool already populated")]
    AlreadyPrefilled,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("decode append before prefill")]
    NotPrefilled,
    #[error("slot vector length {got} does not match layout ({expected} = heads x head_dim)")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("slot at position {position} has phase {got:?}, expected {expected:?}")]
    WrongPhase {
        position: usize,
        expected: Phase,
        got: Phase,
    },
    #[error("slot position {got} out of order (expected {expected})")]
    PositionOutOfOrder { expected: usize, got: usize },
    #[error("eviction index {index} out of range for decode pool of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("eviction indices must be strictly increasing")]
    UnsortedIndices,
    #[error("attempted to evict a prefill slot")]
    PrefillEvictionAttempt,
    #[error("importance vector length {importance} disagrees with decode pool size {decode}")]
    Misaligned { importance: usize, decode: usize },
    #[error("decode budget must be at least 1")]
    InvalidBudget,
    #[error("momentum factor {0} outside [0, 1]")]
    InvalidAlpha(f64),
}

/// Which generation phase produced a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Per-layer shape of the cached key/value vectors.
///
/// A layout with `head_dim == 0` describes a metadata-only pool, which is
/// what trace replay uses: it needs positions, not vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLayout {
    pub n_heads: usize,
    pub head_dim: usize,
}

impl KvLayout {
    pub fn new(n_heads: usize, head_dim: usize) -> Self {
        Self { n_heads, head_dim }
    }

    pub fn metadata_only() -> Self {
        Self {
            n_heads: 1,
            head_dim: 0,
        }
    }

    /// Length of the flattened per-slot key (and value) vector.
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// One cached token: its immutable global position plus per-head K and V.
///
/// Keys and values are stored flattened head-major: head `h` occupies
/// `[h * head_dim, (h + 1) * head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSlot<S> {
    global_position: usize,
    key: Vec<S>,
    value: Vec<S>,
    phase: Phase,
}

impl<S: Scalar> TokenSlot<S> {
    pub fn new(global_position: usize, key: Vec<S>, value: Vec<S>, phase: Phase) -> Self {
        Self {
            global_position,
            key,
            value,
            phase,
        }
    }

    /// A slot carrying no vectors, for metadata-only pools.
    pub fn marker(global_position: usize, phase: Phase) -> Self {
        Self::new(global_position, Vec::new(), Vec::new(), phase)
    }

    pub fn global_position(&self) -> usize {
        self.global_position
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn key(&self) -> &[S] {
        &self.key
    }

    pub fn value(&self) -> &[S] {
        &self.value
    }

    pub fn key_head(&self, head: usize, head_dim: usize) -> &[S] {
        &self.key[head * head_dim..(head + 1) * head_dim]
    }

    pub fn value_head(&self, head: usize, head_dim: usize) -> &[S] {
        &self.value[head * head_dim..(head + 1) * head_dim]
    }

    fn check_layout(&self, layout: &KvLayout) -> Result<(), CacheError> {
        let expected = layout.width();
        for got in [self.key.len(), self.value.len()] {
            if got != expected {
                return Err(CacheError::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }

    fn check_phase(&self, expected: Phase) -> Result<(), CacheError> {
        if self.phase != expected {
            return Err(CacheError::WrongPhase {
                position: self.global_position,
                expected,
                got: self.phase,
            });
        }
        Ok(())
    }
}

/// Per-decode-slot importance scores, kept in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    scores: Vec<f64>,
    momentum_alpha: f64,
}

impl ImportanceVector {
    pub fn new(momentum_alpha: f64) -> Result<Self, CacheError> {
        if !(0.0..=1.0).contains(&momentum_alpha) {
            return Err(CacheError::InvalidAlpha(momentum_alpha));
        }
        Ok(Self {
            scores: Vec::new(),
            momentum_alpha,
        })
    }

    pub fn momentum_alpha(&self) -> f64 {
        self.momentum_alpha
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub(crate) fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    #[cfg(test)]
    pub(crate) fn from_scores(momentum_alpha: f64, scores: Vec<f64>) -> Self {
        Self {
            scores,
            momentum_alpha,
        }
    }

    fn push_zero(&mut self) {
        self.scores.push(0.0);
    }
}

/// The cache for one transformer layer.
#[derive(Debug, Clone)]
pub struct CachePool<S> {
    layout: KvLayout,
    prefill: Vec<TokenSlot<S>>,
    decode: Vec<TokenSlot<S>>,
    decode_budget: usize,
}

impl<S: Scalar> CachePool<S> {
    pub fn new(layout: KvLayout, decode_budget: usize) -> Result<Self, CacheError> {
        if decode_budget == 0 {
            return Err(CacheError::InvalidBudget);
        }
        Ok(Self {
            layout,
            prefill: Vec::new(),
            decode: Vec::new(),
            decode_budget,
        })
    }

    pub fn layout(&self) -> KvLayout {
        self.layout
    }

    pub fn decode_budget(&self) -> usize {
        self.decode_budget
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill.len()
    }

    pub fn prefill(&self) -> &[TokenSlot<S>] {
        &self.prefill
    }

    pub fn decode(&self) -> &[TokenSlot<S>] {
        &self.decode
    }

    pub fn decode_len(&self) -> usize {
        self.decode.len()
    }

    /// `|prefill| + |decode|`.
    pub fn total_size(&self) -> usize {
        self.prefill.len() + self.decode.len()
    }

    /// Number of decode slots above budget, `max(0, |decode| - B_d)`.
    pub fn overflow(&self) -> usize {
        self.decode.len().saturating_sub(self.decode_budget)
    }

    pub fn decode_positions(&self) -> Vec<usize> {
        self.decode.iter().map(TokenSlot::global_position).collect()
    }

    /// Prefill slots followed by decode slots, in attention order.
    pub fn iter_slots(&self) -> impl Iterator<Item = &TokenSlot<S>> + Clone {
        self.prefill.iter().chain(self.decode.iter())
    }

    /// Populates the frozen prefill pool. Slots must carry positions `0..M`.
    pub fn append_prefill(&mut self, slots: Vec<TokenSlot<S>>) -> Result<(), CacheError> {
        if !self.prefill.is_empty() || !self.decode.is_empty() {
            return Err(CacheError::AlreadyPrefilled);
        }
        if slots.is_empty() {
            return Err(CacheError::EmptyPrompt);
        }
        for (i, slot) in slots.iter().enumerate() {
            slot.check_layout(&self.layout)?;
            slot.check_phase(Phase::Prefill)?;
            if slot.global_position != i {
                return Err(CacheError::PositionOutOfOrder {
                    expected: i,
                    got: slot.global_position,
                });
            }
        }
        self.prefill = slots;
        Ok(())
    }

    /// Appends a decode slot and a zero importance entry.
    ///
    /// The pool may hold more than `decode_budget` slots afterwards; the
    /// overflow is resolved only after the step's importance update.
    pub fn append_decode(
        &mut self,
        importance: &mut ImportanceVector,
        slot: TokenSlot<S>,
    ) -> Result<(), CacheError> {
        if self.prefill.is_empty() {
            return Err(CacheError::NotPrefilled);
        }
        self.check_aligned(importance)?;
        slot.check_layout(&self.layout)?;
        slot.check_phase(Phase::Decode)?;
        let min_position = self
            .decode
            .last()
            .map_or(self.prefill.len(), |s| s.global_position + 1);
        if slot.global_position < min_position {
            return Err(CacheError::PositionOutOfOrder {
                expected: min_position,
                got: slot.global_position,
            });
        }
        self.decode.push(slot);
        importance.push_zero();
        Ok(())
    }

    /// Removes the decode slots (and their scores) at `indices`.
    ///
    /// `indices` must be strictly increasing decode-pool indices. Survivors
    /// keep their relative order.
    pub fn evict_indices(
        &mut self,
        importance: &mut ImportanceVector,
        indices: &[usize],
    ) -> Result<Vec<TokenSlot<S>>, CacheError> {
        self.check_aligned(importance)?;
        let len = self.decode.len();
        for pair in indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(CacheError::UnsortedIndices);
            }
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(CacheError::IndexOutOfRange { index, len });
        }
        if indices.is_empty() {
            return Ok(Vec::new());
        }
        if indices.len() == 1 {
            let i = indices[0];
            importance.scores.remove(i);
            return Ok(vec![self.decode.remove(i)]);
        }

        let mut removed = Vec::with_capacity(indices.len());
        let mut kept = Vec::with_capacity(len - indices.len());
        let mut kept_scores = Vec::with_capacity(len - indices.len());
        let mut victims = indices.iter().copied().peekable();
        for (i, (slot, score)) in self
            .decode
            .drain(..)
            .zip(importance.scores.drain(..))
            .enumerate()
        {
            if victims.peek() == Some(&i) {
                victims.next();
                removed.push(slot);
            } else {
                kept.push(slot);
                kept_scores.push(score);
            }
        }
        self.decode = kept;
        importance.scores = kept_scores;
        Ok(removed)
    }

    fn check_aligned(&self, importance: &ImportanceVector) -> Result<(), CacheError> {
        if importance.len() != self.decode.len() {
            return Err(CacheError::Misaligned {
                importance: importance.len(),
                decode: self.decode.len(),
            });
        }
        Ok(())
    }
}
