//! Long-tail skill-routing workbench: synthetic heterogeneous routing
//! traffic, a hypothesis-ranking router, three conditional augmenters, the
//! intrinsic metric suite and the extrinsic evaluation harness.

pub mod corpus;
pub mod error;
pub mod vocab;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod router;

/// Router trained and served in single precision.
pub type Router = router::RouterParams<f32>;
pub mod metrics;
pub mod sampling;
pub mod seq2seq;
/// Joint generator trained and sampled in single precision.
pub type Seq2SeqGenerator = seq2seq::Seq2SeqParams<f32>;
pub mod condition;
pub mod vae;
pub mod mlm;
pub mod pipeline;
/// Conditional variational masked LM in single precision.
pub type MlmAugmenter = mlm::MlmParams<f32>;
/// Conditional VAE (either prior) in single precision.
pub type Vae = vae::VaeParams<f32>;
