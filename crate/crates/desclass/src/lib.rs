//! Description-based text classification.
//!
//! Class labels carry natural-language descriptions that are concatenated
//! with the input before classification. Descriptions come from hand-written
//! templates, from an extractive span policy trained with REINFORCE, or from
//! an abstractive generator trained with per-step rewards; either policy is
//! trained jointly with the classifier.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, tape autodiff, Adam, gradient checking
//! - [`text`]: vocabulary, tokenization, datasets, ROUGE-L
//! - [`encoder`]: input packing and the transformer classifier heads
//! - [`templates`]: the template description registry
//! - [`extractive`]: span-pointer description policy + REINFORCE
//! - [`abstractive`]: seq2seq description generator + per-step rewards
//! - [`harness`]: experiment configs, synthetic data, training loops,
//!   metrics, ablations, checkpoints
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability, and the `desclass` binary for the file-driven CLI.

pub mod tensor;
pub mod abstractive;
pub mod checkpoint;
pub mod encoder;
pub mod harness;
pub mod extractive;
pub mod templates;
pub mod text;

pub use tensor::{Scalar, Tensor};
