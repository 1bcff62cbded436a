//! symlab: a desk-scale laboratory for noisy-embedding instruction fine-tuning.
//!
//! The crate implements the full experiment stack on a miniature,
//! fully deterministic f64 language model:
//!
//! - [`noise`]: sampling uniform / Gaussian / Bernoulli-sign perturbations,
//!   per-sequence scaling, and symmetric ± embedding pairs
//! - [`normlab`]: Monte-Carlo verification of the closed-form L2 norms and
//!   of the √3 ratio between Gaussian/Bernoulli and uniform noise
//! - [`tinylm`]: a miniature decoder-only transformer with exact
//!   reverse-mode gradients
//! - [`finetune`]: the noisy-embedding training loops and the no-noise
//!   baseline
//! - [`probes`]: symmetric finite-difference curvature probes around
//!   embedding points
//! - [`textmetrics`]: length, n-gram repetition, and log-diversity metrics
//!   for generated text
//!
//! Everything is reproducible bit-for-bit from `(config, corpus, build)`;
//! see [`rng`] for the fixed generator choices.

pub mod data;
pub mod error;
pub mod exec;
pub mod finetune;
pub mod noise;
pub mod normlab;
pub mod numerics;
pub mod probes;
pub mod rng;
pub mod textmetrics;
pub mod tinylm;

pub use error::{Error, Result};
