//! Differentiable substrate: convolution, pooling, upsampling, losses, Adam.
//!
//! Layers are plain structs that cache whatever their backward pass needs
//! during `forward(.., train=true)`. There is no autodiff tape — the two
//! networks are feedforward and join at a single weighted-loss node, so the
//! chain rule is wired explicitly in [`crate::models`] and
//! [`crate::training`]. All convolutions have stride 1; spatial reduction is
//! done by 2×2 max-pooling and expansion by 2× nearest-neighbor upsampling.
//!
//! Everything is generic over [`Element`] (`f32`/`f64`) and single-threaded;
//! given identical inputs the substrate is bit-deterministic in both widths.

mod conv;
mod layers;
mod loss;
mod optim;

pub use conv::{conv2d, conv2d_backward, Conv2d};
pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, split_channels, MaxPool2, Relu,
    Upsample2,
};
pub use loss::{bce_with_logits, sigmoid};
pub use optim::{grad_norm, zero_grads, Adam, HasParams, ParamTensor};
