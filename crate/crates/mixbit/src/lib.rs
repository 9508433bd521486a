//! Mixed-precision quantized-network toolkit.
//!
//! Two halves, matching the two deployment-relevant problems of mixed
//! precision: a differentiable per-layer bitwidth search that keeps one meta
//! weight tensor and one convolution per layer regardless of how many
//! candidate bitwidths compete, and a binary-decomposition execution path
//! that runs the resulting mixed-precision convolutions exactly on ordinary
//! CPUs with AND + popcount arithmetic.
//!
//! The pipeline is `search` (learn per-layer weight/activation bitwidths
//! under a FLOPs budget) -> `select` (argmax over the learned strengths) ->
//! `retrain` (quantization-aware training of the fixed plan) -> `export-bd` /
//! `infer-bd` (bit-plane deployment). See the `cli` module or the README for
//! the command surface.

pub mod bindec;
pub mod cli;
pub mod costmodel;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod search;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
