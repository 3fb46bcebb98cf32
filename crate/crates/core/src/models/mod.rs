//! The two networks: an encoder–decoder segmentation module and the VGG-style
//! quality awareness module (QAM).
//!
//! Both are built from the [`crate::nn`] substrate with explicit backward
//! passes, initialized deterministically from `(config, seed)`, and expose
//! their parameters through [`crate::nn::HasParams`] for the optimizer and
//! checkpoints. Architectural choices the two share (nonlinearity,
//! normalization, upsampling) are pinned in [`ModelProfile`], which is also
//! what checkpoint compatibility is hashed from.

mod profile;
mod qam;
mod segnet;

pub use profile::{ModelProfile, PROFILE_FILE};
pub use qam::Qam;
pub use segnet::SegNet;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{CoreError, Result};
use crate::Element;

/// Segmentation network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    /// Image channels (1 for grayscale).
    pub in_channels: usize,
    /// Output classes `n`; one sigmoid logit map per class.
    pub n_classes: usize,
    /// Encoder levels; the decoder mirrors all but the deepest.
    pub depth: usize,
    /// Channel width at the first level; doubles per level.
    pub base_width: usize,
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "segnet depth must be ≥ 2, got {}",
                self.depth
            )));
        }
        if self.in_channels < 1 || self.n_classes < 1 || self.base_width < 1 {
            return Err(CoreError::InvalidArgument(
                "segnet channels/classes/width must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel width at encoder level `i`.
    pub(crate) fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Quality awareness network shape. Its input is the image concatenated with
/// all `n` label channels, hence `in_channels = image channels + n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QamConfig {
    pub in_channels: usize,
    /// Output width of each conv block; one 2× pool per block.
    pub block_widths: Vec<usize>,
}

impl QamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "QAM input needs image + at least one label channel, got {}",
                self.in_channels
            )));
        }
        if self.block_widths.is_empty() || self.block_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidArgument("QAM block widths must be positive".into()));
        }
        Ok(())
    }
}

/// Stacks dataset samples into batch tensors: images `(B, 1, H, W)` and mask
/// channels `(B, n, H, W)`. `clean` picks the retained originals where
/// present (falling back to the training masks for uncorrupted samples).
pub fn stack_batch<T: Element>(
    d: &Dataset,
    indices: &[usize],
    clean: bool,
) -> Result<(Array4<T>, Array4<T>)> {
    if indices.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let (h, w) = d.dims();
    let n_classes = d.n_classes();
    let mut images = Array4::zeros((indices.len(), 1, h, w));
    let mut masks = Array4::zeros((indices.len(), n_classes, h, w));
    for (bi, &si) in indices.iter().enumerate() {
        let s = d.samples.get(si).ok_or_else(|| {
            CoreError::InvalidArgument(format!("batch index {si} out of range"))
        })?;
        for ((y, x), &v) in s.image.pixels.indexed_iter() {
            images[(bi, 0, y, x)] = T::from_f32(v);
        }
        let set = if clean { s.clean_masks.as_ref().unwrap_or(&s.masks) } else { &s.masks };
        for (c, ch) in set.channels.iter().enumerate() {
            for ((y, x), &v) in ch.indexed_iter() {
                masks[(bi, c, y, x)] = T::from_usize(v as usize);
            }
        }
    }
    Ok((images, masks))
}
