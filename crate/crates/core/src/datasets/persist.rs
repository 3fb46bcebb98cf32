//! On-disk dataset layout.
//!
//! ```text
//! <dir>/
//!   dataset.json              ids, class_names, size, seed
//!   images/<id>.png           8-bit grayscale
//!   masks/<id>_<class>.png    0/255 binary
//!   clean_masks/<id>_<class>.png   original masks of corrupted samples
//! ```
//!
//! A sample is marked corrupted iff its clean masks are present; the
//! corruption manifest (written by the corruption module next to
//! `dataset.json`) carries the op/radius details.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Image2D, MaskSet, Sample};
use crate::error::{CoreError, Result};

/// `dataset.json` schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub class_names: Vec<String>,
    /// Square image side length.
    pub size: usize,
    /// Generator seed, when the dataset came from the synthetic generator.
    pub seed: Option<u64>,
}

/// Dataset manifest file name inside a dataset directory.
pub const DATASET_MANIFEST_FILE: &str = "dataset.json";

fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(CoreError::InvalidArgument(format!(
            "{kind} {name:?} is not filesystem-safe (use [A-Za-z0-9_.-])"
        )))
    }
}

/// Persists a dataset directory. `seed` is recorded in the manifest when the
/// dataset came from the synthetic generator.
pub fn save_dataset(d: &Dataset, dir: &Path, seed: Option<u64>) -> Result<()> {
    d.validate()?;
    let (h, w) = d.dims();
    if h != w {
        return Err(CoreError::InvalidArgument(format!(
            "dataset persistence expects square images, got {h}x{w}"
        )));
    }
    for s in &d.samples {
        check_name("sample id", &s.id)?;
    }
    for c in &d.class_names {
        check_name("class name", c)?;
    }

    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| CoreError::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| CoreError::io(&masks, e))?;
    let clean_dir = dir.join("clean_masks");
    if d.any_corrupted() {
        fs::create_dir_all(&clean_dir).map_err(|e| CoreError::io(&clean_dir, e))?;
    }

    for s in &d.samples {
        write_gray(&images.join(format!("{}.png", s.id)), &s.image.pixels)?;
        for (ch, name) in s.masks.channels.iter().zip(&d.class_names) {
            write_mask(&masks.join(format!("{}_{}.png", s.id, name)), ch)?;
        }
        if let Some(clean) = &s.clean_masks {
            for (ch, name) in clean.channels.iter().zip(&d.class_names) {
                write_mask(&clean_dir.join(format!("{}_{}.png", s.id, name)), ch)?;
            }
        }
    }

    let manifest = DatasetManifest {
        ids: d.samples.iter().map(|s| s.id.clone()).collect(),
        class_names: d.class_names.clone(),
        size: h,
        seed,
    };
    let path = dir.join(DATASET_MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| CoreError::io(&path, e))
}

/// Loads a dataset directory written by [`save_dataset`]. Returns the dataset
/// and its manifest.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_path = dir.join(DATASET_MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| CoreError::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| CoreError::json(&manifest_path, e))?;
    if manifest.ids.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "dataset at {} lists zero samples",
            dir.display()
        )));
    }

    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let image_path = dir.join("images").join(format!("{id}.png"));
        let image = Image2D::new(read_gray(&image_path)?)?;
        let read_set = |subdir: &str| -> Result<MaskSet> {
            let channels = manifest
                .class_names
                .iter()
                .map(|name| read_mask(&dir.join(subdir).join(format!("{id}_{name}.png"))))
                .collect::<Result<Vec<_>>>()?;
            MaskSet::new(channels, manifest.class_names.clone())
        };
        let masks = read_set("masks")?;
        // Clean masks on disk mark the sample as corrupted.
        let clean_probe = dir
            .join("clean_masks")
            .join(format!("{id}_{}.png", manifest.class_names[0]));
        let (corrupted, clean_masks) =
            if clean_probe.exists() { (true, Some(read_set("clean_masks")?)) } else { (false, None) };
        let mut sample = Sample::new(id.clone(), image, masks)?;
        sample.corrupted = corrupted;
        sample.clean_masks = clean_masks;
        sample.validate()?;
        samples.push(sample);
    }
    let dataset = Dataset::new(samples, manifest.class_names.clone())?;
    Ok((dataset, manifest))
}

fn write_gray(path: &PathBuf, pixels: &Array2<f32>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in pixels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, Luma([(v * 255.0).round() as u8]));
    }
    img.save(path).map_err(|e| CoreError::image(path.clone(), e))
}

fn write_mask(path: &PathBuf, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.indexed_iter() {
        img.put_pixel(x as u32, y as u32, Luma([if v == 1 { 255 } else { 0 }]));
    }
    img.save(path).map_err(|e| CoreError::image(path.clone(), e))
}

pub(crate) fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| CoreError::io(path, e))?
        .decode()
        .map_err(|e| CoreError::image(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    }))
}

pub(crate) fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = ImageReader::open(path)
        .map_err(|e| CoreError::io(path, e))?
        .decode()
        .map_err(|e| CoreError::image(path, e))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32).0[0] >= 128)
    }))
}
