//! Vision-token compression projectors for multimodal language models.
//!
//! Encoder features from several blocks are fused channel-wise, then each
//! disjoint `k x k` window of tokens is fused into `E` tokens by a strided
//! convolution, cutting the LLM-bound sequence from `H * W` to
//! `(H / k) * (W / k) * E`. The crate also carries the average-pooling and
//! token-concatenation baselines, an analytical FLOPs model, a
//! finite-difference gradient checker, and the `tokenfuse` command line tool.

pub mod autograd;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub use fusion::{FeatureStack, FusionConfig, ModuleParams, ProjectorKind, TokenSequence};
pub use tensor::Tensor;
