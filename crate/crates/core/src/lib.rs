//! Training framework for image segmentation under noisy labels.
//!
//! The core idea: a quality awareness network scores every (image, annotation)
//! pair in a mini-batch, a squashing function bounds the relative scores, and
//! the per-sample segmentation losses are re-weighted by the batch softmax of
//! those scores before backpropagation. Training on labels of mixed quality
//! then concentrates the gradient on the annotations that are consistent with
//! the images.
//!
//! Module map:
//!
//! - [`datasets`] — synthetic shape generation, JSRT-style ingestion, split,
//!   resize, deterministic batching, on-disk dataset layout.
//! - [`corruption`] — morphological label-noise synthesis (seeded erosion /
//!   dilation of mask channels) with a full provenance manifest.
//! - [`nn`] — the differentiable substrate: conv / pool / upsample / losses
//!   with hand-derived backward passes, plus Adam. Generic over [`f32`] and
//!   [`f64`] via [`elem::Element`].
//! - [`models`] — the encoder–decoder segmentation network and the VGG-style
//!   quality awareness network built on top of [`nn`].
//! - [`reweighting`] — the math core: score squashing, batch softmax, the
//!   weighted loss and its analytic gradients.
//! - [`training`] — the joint optimization loop, metrics/step logging, weight
//!   dynamics tracking and checkpointing.
//! - [`evaluation`] — Dice metric, model evaluation, results-table assembly.

pub mod corruption;
pub mod datasets;
pub mod elem;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod reweighting;
pub mod training;
pub(crate) mod util;

pub use elem::Element;
pub use error::{CoreError, Result};

/// Environment variable that switches training and evaluation to 64-bit
/// arithmetic. Use it for determinism and gradient checks; 32-bit is the
/// default for speed.
pub const TEST_MODE_ENV: &str = "PAL_TEST_MODE";

/// True when `PAL_TEST_MODE=1` is set in the environment.
pub fn test_mode() -> bool {
    std::env::var(TEST_MODE_ENV).map(|v| v == "1").unwrap_or(false)
}
