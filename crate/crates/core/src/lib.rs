//! Mixture-of-adapters multimodal instruction tuning at desk scale.
//!
//! A toy multimodal transformer assembled from a frozen vision encoder, a
//! query bridge for holistic visual tokens, a multi-level vision aggregator
//! for fine-grained tokens, and a frozen causal language model whose FFN
//! layers carry task-routed adapters. Training runs in stages with exact
//! per-stage freezing; evaluation covers grounding (IoU@0.5), candidate
//! ranking (top-1, MRR) and greedy decoding.

pub mod aggregator;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod moa;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
