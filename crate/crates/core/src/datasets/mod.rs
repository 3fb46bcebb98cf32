//! Segmentation datasets: domain types, splitting, resizing and batching.
//!
//! Two ingestion paths feed the trainer: a deterministic synthetic shapes
//! generator ([`generate_synthetic`]) for desk-scale experiments, and a
//! JSRT/SCR-style loader ([`jsrt::load_jsrt`]) for chest radiographs with
//! per-structure masks. Both produce the same [`Dataset`] shape.
//!
//! Masks are multi-label: one binary channel per class, channels may overlap
//! (clavicles lie over lungs). Everything here is deterministic — same
//! arguments, same seed, same output.

mod persist;
mod synthetic;

pub mod jsrt;

pub use persist::{load_dataset, save_dataset, DatasetManifest, DATASET_MANIFEST_FILE};
pub use synthetic::generate_synthetic;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::util::{rng_for_stream, rng_from_seed, round_half_up};

/// Minimum spatial side length; anything smaller cannot pass through the
/// network downsampling depth.
pub const MIN_SIDE: usize = 16;

/// One grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub pixels: Array2<f32>,
}

impl Image2D {
    /// Wraps a pixel array, checking the range/finiteness invariants.
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(CoreError::InvalidArgument(format!(
                "image {h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidArgument(
                "image intensities must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// The multi-label annotation of one image: one binary channel per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// One `{0,1}` array per class, all the same shape as the paired image.
    pub channels: Vec<Array2<u8>>,
    /// Class names, ordered to match `channels`.
    pub class_names: Vec<String>,
}

impl MaskSet {
    pub fn new(channels: Vec<Array2<u8>>, class_names: Vec<String>) -> Result<Self> {
        if channels.len() != class_names.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} mask channels but {} class names",
                channels.len(),
                class_names.len()
            )));
        }
        if channels.is_empty() {
            return Err(CoreError::InvalidArgument("mask set needs at least one class".into()));
        }
        let dim = channels[0].dim();
        for (ch, name) in channels.iter().zip(&class_names) {
            if ch.dim() != dim {
                return Err(CoreError::ShapeMismatch(format!(
                    "mask channel {name} has shape {:?}, expected {:?}",
                    ch.dim(),
                    dim
                )));
            }
            if !ch.iter().all(|&v| v <= 1) {
                return Err(CoreError::InvalidArgument(format!(
                    "mask channel {name} contains values outside {{0, 1}}"
                )));
            }
        }
        Ok(Self { channels, class_names })
    }

    pub fn n_classes(&self) -> usize {
        self.channels.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    /// Foreground pixel count of one channel.
    pub fn area(&self, channel: usize) -> usize {
        self.channels[channel].iter().filter(|&&v| v == 1).count()
    }
}

/// One image with its annotation and corruption provenance.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image2D,
    pub masks: MaskSet,
    /// Whether `masks` was synthetically corrupted.
    pub corrupted: bool,
    /// Original annotation; present exactly when `corrupted` (kept for oracle
    /// evaluation and weight-dynamics tracking, never for training).
    pub clean_masks: Option<MaskSet>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image2D, masks: MaskSet) -> Result<Self> {
        let sample =
            Self { id: id.into(), image, masks, corrupted: false, clean_masks: None };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let img_dim = self.image.pixels.dim();
        if self.masks.shape() != img_dim {
            return Err(CoreError::ShapeMismatch(format!(
                "sample {}: masks {:?} vs image {:?}",
                self.id,
                self.masks.shape(),
                img_dim
            )));
        }
        match (self.corrupted, &self.clean_masks) {
            (false, Some(_)) => Err(CoreError::InvalidArgument(format!(
                "sample {}: clean_masks present without corruption flag",
                self.id
            ))),
            (true, None) => Err(CoreError::InvalidArgument(format!(
                "sample {}: corrupted without retained clean_masks",
                self.id
            ))),
            (true, Some(clean)) if clean.shape() != self.masks.shape() => {
                Err(CoreError::ShapeMismatch(format!(
                    "sample {}: clean_masks {:?} vs masks {:?}",
                    self.id,
                    clean.shape(),
                    self.masks.shape()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// An ordered, shape-consistent collection of samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let d = Self { samples, class_names };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(CoreError::InvalidArgument("dataset has no samples".into()));
        }
        let dim = self.samples[0].image.pixels.dim();
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            s.validate()?;
            if s.masks.class_names != self.class_names {
                return Err(CoreError::InvalidArgument(format!(
                    "sample {} class names {:?} differ from dataset {:?}",
                    s.id, s.masks.class_names, self.class_names
                )));
            }
            if s.image.pixels.dim() != dim {
                return Err(CoreError::ShapeMismatch(format!(
                    "sample {} is {:?}, dataset is {:?}",
                    s.id,
                    s.image.pixels.dim(),
                    dim
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(CoreError::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Spatial side lengths `(height, width)` shared by every sample.
    pub fn dims(&self) -> (usize, usize) {
        self.samples[0].image.pixels.dim()
    }

    /// True when any sample carries corruption provenance.
    pub fn any_corrupted(&self) -> bool {
        self.samples.iter().any(|s| s.corrupted)
    }
}

/// Deterministic train/test split policy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Fraction of samples assigned to the training side, in `(0, 1)`.
    pub train_fraction: f64,
    pub seed: u64,
}

/// Splits into disjoint (train, test) parts covering the input.
///
/// The train side gets `round_half_up(train_fraction * N)` samples chosen by
/// a seeded shuffle; both sides keep the original dataset order internally.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n = d.len();
    let n_train = round_half_up(spec.train_fraction * n as f64);
    if n_train == 0 || n_train == n {
        return Err(CoreError::InvalidArgument(format!(
            "split of {n} samples at fraction {} leaves one side empty",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(spec.seed));
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| d.samples[i].clone()).collect(),
            d.class_names.clone(),
        )
    };
    Ok((pick(&train_idx)?, pick(&test_idx)?))
}

/// One mini-batch of dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Final short batch of an epoch. Its weights still softmax-normalize
    /// within the smaller batch, but weight-dynamics windows skip it.
    pub partial: bool,
}

/// Seeded batch schedule for one epoch: `ceil(N / batch_size)` batches
/// covering a permutation of the dataset.
///
/// The permutation is a pure function of `(seed, epoch)`. The final partial
/// batch is kept, not dropped, and flagged — per-sample weights are
/// batch-relative, so downstream consumers need to know its size differs.
pub fn batch_iterator(
    d: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    batch_indices(d.len(), batch_size, seed, epoch)
}

/// Index-level variant of [`batch_iterator`].
pub fn batch_indices(
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > n_samples {
        return Err(CoreError::InvalidArgument(format!(
            "batch_size {batch_size} must lie in [1, {n_samples}]"
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng_for_stream(seed, epoch as u64));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch { indices: chunk.to_vec(), partial: chunk.len() != batch_size })
        .collect())
}

/// Resizes every image (bilinear) and mask (nearest-neighbor) to
/// `target x target`. Input must be square; masks stay binary by
/// construction of nearest-neighbor sampling.
pub fn resize_dataset(d: &Dataset, target: usize) -> Result<Dataset> {
    if target < MIN_SIDE {
        return Err(CoreError::InvalidArgument(format!(
            "resize target {target} is below the {MIN_SIDE} minimum"
        )));
    }
    let (h, w) = d.dims();
    if h != w {
        return Err(CoreError::InvalidArgument(format!(
            "resize requires square input, got {h}x{w} (no pad policy is defined)"
        )));
    }
    if h == target {
        return Ok(d.clone());
    }
    let samples = d
        .samples
        .iter()
        .map(|s| {
            let resize_masks = |m: &MaskSet| -> Result<MaskSet> {
                MaskSet::new(
                    m.channels.iter().map(|ch| resize_nearest(ch, target)).collect(),
                    m.class_names.clone(),
                )
            };
            Ok(Sample {
                id: s.id.clone(),
                image: Image2D::new(resize_bilinear(&s.image.pixels, target))?,
                masks: resize_masks(&s.masks)?,
                corrupted: s.corrupted,
                clean_masks: s.clean_masks.as_ref().map(resize_masks).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, d.class_names.clone())
}

/// Bilinear resampling with the pixel-center convention.
fn resize_bilinear(src: &Array2<f32>, target: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let scale_y = h as f64 / target as f64;
    let scale_x = w as f64 / target as f64;
    Array2::from_shape_fn((target, target), |(oy, ox)| {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
        let bot = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
        (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
    })
}

/// Nearest-neighbor resampling; only ever emits values present in the input.
fn resize_nearest(src: &Array2<u8>, target: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    let scale_y = h as f64 / target as f64;
    let scale_x = w as f64 / target as f64;
    Array2::from_shape_fn((target, target), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * scale_y).floor() as usize).min(h - 1);
        let sx = (((ox as f64 + 0.5) * scale_x).floor() as usize).min(w - 1);
        src[(sy, sx)]
    })
}
