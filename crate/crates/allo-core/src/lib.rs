//! Low-redundant preference optimization for a tiny built-in causal language
//! model.
//!
//! The crate trains a decoder-only transformer on preference pairs while
//! restricting optimizer updates to the parameter elements ("neurons") that a
//! warm-up run identified as important, and restricting the loss to the
//! response tokens that a revision scorer identified as carrying unaligned
//! content. Alignment runs in two stages: a forgetting stage that unlearns
//! unaligned knowledge with a token-weighted NPO loss on a small neuron set,
//! then a learning stage that improves alignment with a token-weighted DPO
//! loss on a larger neuron set.
//!
//! Everything is 64-bit, single-process, and deterministic under a seed, so
//! training runs are reproducible bit-for-bit and gradients can be verified
//! against finite differences.

pub mod container;
pub mod data;
pub mod eval;
pub mod importance;
pub mod losses;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod reward;
pub mod tensor;
pub mod train;

pub use data::{PreferenceTriple, SyntheticTaskSpec, TaskKind, Vocabulary};
pub use importance::ImportanceMap;
pub use losses::{LossConfig, TokenLogRatios};
pub use mask::NeuronMask;
pub use model::{Model, ModelConfig};
pub use tensor::{GradMap, ParamMap, Tensor};
