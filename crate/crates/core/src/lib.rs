//! Composed vision encoders fused by multi-head cross-attention, wired into
//! a small LLaVA-style multimodal model.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Rng, Scalar, Tensor, Var};
pub mod checkpoint;
pub mod nn;
pub mod params;
pub mod vit;
pub mod fusion;
pub mod tokenizer;
pub mod mllm;
pub mod data;
pub mod training;
pub mod eval;
pub mod experiment;
pub mod checks;
