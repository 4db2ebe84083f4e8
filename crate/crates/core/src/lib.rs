// Kernels index several parallel arrays per loop.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod engine;
pub mod lora;
pub mod numerics;
pub mod pool;
pub mod radix;
pub mod verify;
pub mod workload;

pub use attention::{AttentionConfig, KvTile};
pub use engine::{AgentRequest, CostModel, Engine, EngineConfig, EngineError, EngineMode, Metrics, TimelineRow};
pub use lora::{AdapterId, BaseModel, LoraAdapter, ModelGeometry, TokenId};
pub use numerics::{Matrix, MatrixView, RopeTable};
pub use pool::{BlockHandle, BlockPool, KvPools, PoolKind, PoolStats};
pub use radix::{AgentId, BaseKeying, DualRadixTree, RadixForest};
pub use workload::{GenParams, Pattern, RunConfig, RunReport, Trace, TraceRecord};
