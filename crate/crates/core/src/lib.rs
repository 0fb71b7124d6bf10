//! Decode-time KV-cache eviction driven by momentum-aggregated attention.
//!
//! The cache for each layer is split into a frozen prefill pool and a decode
//! pool bounded by a budget `B_d`. After every decode step the policy folds
//! the step's attention row into per-slot importance scores and, if the decode
//! pool overflows, evicts the lowest-scoring slots.
//!
//! * [`cache`]: token slots, the two-pool [`CachePool`] and [`ImportanceVector`].
//! * [`policy`]: MomentKV and the baselines behind one [`Policy`] value.
//! * [`model`]: a seeded toy decoder for closed-loop runs.
//! * [`trace`]: the ATTRC01 trace format, synthetic generators and replay.
//! * [`metrics`]: retained mass, recency CDFs, oracle agreement and timing.
//!
//! Model arithmetic is generic over [`Scalar`] (`f32` or `f64`); importance
//! scores are always `f64`.
//!
//! ```
//! use momentkv::{LayerCacheF32, KvLayout, Phase, Policy, TokenSlot, AttentionRow};
//!
//! let mut layer = LayerCacheF32::new(KvLayout::metadata_only(), Policy::moment_kv(0.9, 2).unwrap()).unwrap();
//! layer.prefill(vec![TokenSlot::marker(0, Phase::Prefill)]).unwrap();
//! for (t, row) in [vec![0.5, 0.5], vec![0.2, 0.7, 0.1], vec![0.1, 0.1, 0.4, 0.4]].into_iter().enumerate() {
//!     let step = t + 1;
//!     layer.append(TokenSlot::marker(step, Phase::Decode)).unwrap();
//!     layer.observe(&AttentionRow::new(row, step, 1)).unwrap();
//!     layer.enforce(step).unwrap();
//! }
//! assert_eq!(layer.pool().decode_positions(), vec![1, 2]);
//! ```

pub mod cache;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod scalar;
pub mod trace;

use thiserror::Error;

pub use cache::{CacheError, CachePool, ImportanceVector, KvLayout, Phase, TokenSlot};
pub use metrics::{MetricsError, PolicyReport, RunMode};
pub use model::{DecodeSession, ModelError, ModelSpec, StepOutput, ToyModel};
pub use policy::{
    AttentionRow, EvictionDecision, LayerCache, Policy, PolicyConfig, PolicyError, PolicyKind,
    PolicyParams,
};
pub use scalar::Scalar;
pub use trace::{TraceError, TraceFile, TraceHeader, TraceSource};

pub type CachePoolF32 = CachePool<f32>;
pub type CachePoolF64 = CachePool<f64>;
pub type LayerCacheF32 = LayerCache<f32>;
pub type LayerCacheF64 = LayerCache<f64>;
pub type ToyModelF32 = ToyModel<f32>;
pub type ToyModelF64 = ToyModel<f64>;
pub type DecodeSessionF32<'m> = DecodeSession<'m, f32>;
pub type DecodeSessionF64<'m> = DecodeSession<'m, f64>;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
