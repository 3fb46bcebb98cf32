//! JSRT/SCR-style ingestion: chest radiographs with per-structure masks.
//!
//! Expected layout (pre-converted 8-bit PNG; raw 12-bit `.IMG` decoding is out
//! of scope):
//!
//! ```text
//! <image_dir>/<id>.png
//! <mask_dir>/<structure>/<id>.png     one subdirectory per SCR structure
//! ```
//!
//! A [`ClassGrouping`] merges the five SCR structures (left/right lung,
//! left/right clavicle, heart) into class channels by pixelwise OR — the
//! standard grouping yields three classes: lungs, heart, clavicles. Images are
//! min-max normalized to `[0, 1]` per image. Samples missing any structure
//! mask are skipped and counted in [`LoadStats`].

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::persist::{read_gray, read_mask};
use super::{Dataset, Image2D, MaskSet, Sample};
use crate::error::{CoreError, Result};

/// One output class built from one or more structure masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Structure mask subdirectories OR-ed into this class.
    pub structures: Vec<String>,
}

/// Ordered mapping from mask structures to dataset classes (`grouping.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGrouping {
    pub classes: Vec<ClassSpec>,
}

impl ClassGrouping {
    /// The standard SCR grouping: 5 structures into 3 classes.
    pub fn scr_default() -> Self {
        let class = |name: &str, structures: &[&str]| ClassSpec {
            name: name.into(),
            structures: structures.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            classes: vec![
                class("lungs", &["left_lung", "right_lung"]),
                class("heart", &["heart"]),
                class("clavicles", &["left_clavicle", "right_clavicle"]),
            ],
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let g: Self = serde_json::from_str(&raw).map_err(|e| CoreError::json(path, e))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CoreError::InvalidArgument("grouping defines no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.name.as_str()) {
                return Err(CoreError::InvalidArgument(format!(
                    "grouping repeats class name {:?}",
                    c.name
                )));
            }
            if c.structures.is_empty() {
                return Err(CoreError::InvalidArgument(format!(
                    "class {:?} groups no structures",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Ingestion outcome counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub loaded: usize,
    /// Samples dropped because a structure mask was absent.
    pub skipped: usize,
}

/// Loads a JSRT-style corpus. Returns the dataset (classes ordered as in
/// `grouping`) together with skip statistics.
pub fn load_jsrt(
    image_dir: &Path,
    mask_dir: &Path,
    grouping: &ClassGrouping,
) -> Result<(Dataset, LoadStats)> {
    grouping.validate()?;
    for dir in [image_dir, mask_dir] {
        if !dir.is_dir() {
            return Err(CoreError::InvalidArgument(format!(
                "{} is not a directory",
                dir.display()
            )));
        }
    }

    let mut ids: Vec<String> = fs::read_dir(image_dir)
        .map_err(|e| CoreError::io(image_dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let is_png = path
                .extension()
                .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
            (path.is_file() && is_png)
                .then(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .flatten()
        })
        .collect();
    ids.sort_unstable();

    let class_names = grouping.class_names();
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    'sample: for id in &ids {
        // All structure masks must exist before any decoding work.
        for c in &grouping.classes {
            for s in &c.structures {
                let p = mask_dir.join(s).join(format!("{id}.png"));
                if !p.is_file() {
                    log::warn!("skipping {id}: missing mask {}", p.display());
                    skipped += 1;
                    continue 'sample;
                }
            }
        }
        let gray = read_gray(&image_dir.join(format!("{id}.png")))?;
        let image = Image2D::new(min_max_normalize(gray))?;
        let channels = grouping
            .classes
            .iter()
            .map(|c| {
                let mut acc: Option<Array2<u8>> = None;
                for s in &c.structures {
                    let m = read_mask(&mask_dir.join(s).join(format!("{id}.png")))?;
                    acc = Some(match acc {
                        None => m,
                        Some(a) => {
                            if a.dim() != m.dim() {
                                return Err(CoreError::ShapeMismatch(format!(
                                    "{id}: structure {s} mask is {:?}, class {} started at {:?}",
                                    m.dim(),
                                    c.name,
                                    a.dim()
                                )));
                            }
                            azip_or(a, &m)
                        }
                    });
                }
                Ok(acc.expect("validated: class has structures"))
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = MaskSet::new(channels, class_names.clone())?;
        samples.push(Sample::new(id.clone(), image, masks)?);
    }

    if samples.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "no samples loaded from {} ({} skipped)",
            image_dir.display(),
            skipped
        )));
    }
    let loaded = samples.len();
    Ok((Dataset::new(samples, class_names)?, LoadStats { loaded, skipped }))
}

fn azip_or(mut a: Array2<u8>, b: &Array2<u8>) -> Array2<u8> {
    a.zip_mut_with(b, |x, &y| *x |= y);
    a
}

/// Per-image min-max normalization; a constant image maps to all zeros.
fn min_max_normalize(mut pixels: Array2<f32>) -> Array2<f32> {
    let min = pixels.iter().copied().fold(f32::INFINITY, f32::min);
    let max = pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max > min {
        pixels.mapv_inplace(|v| ((v - min) / (max - min)).clamp(0.0, 1.0));
    } else {
        pixels.fill(0.0);
    }
    pixels
}
