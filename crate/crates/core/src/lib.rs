//! Gated low-rank adapters on a miniature transformer, with ablation-based
//! per-rank importance scoring and an iterative prune-and-grow allocator.

pub mod adapter;
pub mod allocator;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod experiment;
mod error;
pub mod network;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use adapter::{AloraAdapter, GateMask};
pub use backbone::{Example, ModelConfig, ModuleId, ModuleKind, N_MOD};
pub use error::{Error, Result};
pub use network::{ForwardOptions, GateMode, ParamId, SuperNetwork};
