//! Internal contrastive decoding over a toy multimodal transformer.
//!
//! The decoder runs the first `b = L - K` layers once, forks the boundary
//! state into a full branch and a counterfactual branch whose post-boundary
//! attention cannot see image positions, and fuses the two branches'
//! logits per token as `(1 + α)·z_full − α·z_cf`.
//!
//! The crate is `no_std` (with `alloc`); file formats, timing and the
//! command line live in the companion `sira` crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod engine;
pub mod error;
pub mod masking;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{AnalysisError, EngineError, LayoutError, MaskError, ModelError, SynthError, TensorError};
pub use masking::{PromptLayout, TokenId};
pub use model::{init_model, ModelConfig, ToyModel};
pub use tensor::Matrix;
