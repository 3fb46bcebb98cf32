//! Label corruption: seeded morphological erosion/dilation of mask sets.
//!
//! A [`NoiseSpec`] picks a fraction of samples; each selected sample gets one
//! (op, radius) draw applied to every class channel with a disk structuring
//! element. Originals are retained on the sample (`clean_masks`) and full
//! provenance is recorded in a [`CorruptionManifest`] so downstream tooling
//! can track clean vs. noisy groups without re-deriving anything.
//!
//! Border policy: pixels outside the image are background, so erosion shrinks
//! structures at the borders and dilation is cropped to the frame.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, MaskSet};
use crate::error::{CoreError, Result};
use crate::util::{rng_from_seed, round_half_up};

/// Manifest file name, written next to `dataset.json`.
pub const MANIFEST_FILE: &str = "corruption_manifest.json";

/// Which morphological op(s) the corruptor may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpPolicy {
    Erode,
    Dilate,
    /// Coin-flip between the two per selected sample.
    RandomEither,
}

/// One concrete morphological operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erode,
    Dilate,
}

impl fmt::Display for MorphOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MorphOp::Erode => "erode",
            MorphOp::Dilate => "dilate",
        })
    }
}

/// Corruption policy: which fraction of samples to corrupt and how hard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of samples to corrupt, in `[0, 1]`.
    pub fraction: f64,
    /// Inclusive disk-radius bounds, `1 ≤ radius_min ≤ radius_max`.
    pub radius_min: u32,
    pub radius_max: u32,
    pub op_policy: OpPolicy,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction.is_finite() && (0.0..=1.0).contains(&self.fraction)) {
            return Err(CoreError::InvalidArgument(format!(
                "noise fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        if self.radius_min < 1 {
            return Err(CoreError::InvalidArgument("radius_min must be ≥ 1".into()));
        }
        if self.radius_max < self.radius_min {
            return Err(CoreError::InvalidArgument(format!(
                "radius_max {} < radius_min {}",
                self.radius_max, self.radius_min
            )));
        }
        Ok(())
    }
}

/// Provenance of one corrupted sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionRecord {
    pub sample_id: String,
    pub op: MorphOp,
    pub radius: u32,
    /// Class names whose mask went from non-empty to empty (possible for
    /// small structures under a large erosion radius; kept as legitimate
    /// noise, not rejected).
    pub emptied_classes: Vec<String>,
}

/// The persisted `corruption_manifest.json`: spec echo plus per-sample records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionManifest {
    pub spec: NoiseSpec,
    pub records: Vec<CorruptionRecord>,
}

impl CorruptionManifest {
    /// Ids of corrupted samples, sorted.
    pub fn corrupted_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.sample_id.clone()).collect();
        ids.sort_unstable();
        ids
    }

    /// Writes the manifest into `dir` as [`MANIFEST_FILE`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CoreError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| CoreError::io(&path, e))
    }

    /// Loads [`MANIFEST_FILE`] from `dir`; `Ok(None)` when absent.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let m = serde_json::from_str(&raw).map_err(|e| CoreError::json(&path, e))?;
        Ok(Some(m))
    }
}

/// Offsets of the discretized Euclidean disk: `dx² + dy² ≤ r²`.
fn disk_offsets(r: u32) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn check_radius(r: u32) -> Result<()> {
    if r < 1 {
        Err(CoreError::InvalidArgument("structuring-element radius must be ≥ 1".into()))
    } else {
        Ok(())
    }
}

/// Morphological dilation with a disk of radius `r`. Output ⊇ input.
pub fn dilate(mask: &Array2<u8>, r: u32) -> Result<Array2<u8>> {
    check_radius(r)?;
    let (h, w) = mask.dim();
    let offsets = disk_offsets(r);
    let mut out = Array2::<u8>::zeros((h, w));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        for &(dy, dx) in &offsets {
            let ny = y as i64 + dy;
            let nx = x as i64 + dx;
            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                out[(ny as usize, nx as usize)] = 1;
            }
        }
    }
    Ok(out)
}

/// Morphological erosion with a disk of radius `r`; out-of-frame pixels count
/// as background, so foreground shrinks at the borders. Output ⊆ input.
pub fn erode(mask: &Array2<u8>, r: u32) -> Result<Array2<u8>> {
    check_radius(r)?;
    let (h, w) = mask.dim();
    let offsets = disk_offsets(r);
    let mut out = Array2::<u8>::zeros((h, w));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let keep = offsets.iter().all(|&(dy, dx)| {
            let ny = y as i64 + dy;
            let nx = x as i64 + dx;
            ny >= 0
                && nx >= 0
                && (ny as usize) < h
                && (nx as usize) < w
                && mask[(ny as usize, nx as usize)] == 1
        });
        if keep {
            out[(y, x)] = 1;
        }
    }
    Ok(out)
}

/// Applies `spec` to a clean dataset: selects `round_half_up(fraction · N)`
/// samples via a seeded shuffle, draws one (op, radius) per selected sample
/// (in ascending sample-index order), and applies it to every class channel.
///
/// Unselected samples are untouched; selected samples keep their originals in
/// `clean_masks`. Corrupting an already-corrupted dataset is rejected.
pub fn corrupt(d: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, Vec<CorruptionRecord>)> {
    spec.validate()?;
    d.validate()?;
    if d.any_corrupted() {
        let id = d.samples.iter().find(|s| s.corrupted).map(|s| s.id.clone()).unwrap_or_default();
        return Err(CoreError::AlreadyCorrupted(format!(
            "dataset already carries corruption provenance (e.g. sample {id})"
        )));
    }

    let n = d.len();
    let k = round_half_up(spec.fraction * n as f64).min(n);
    let mut rng = rng_from_seed(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();

    let mut out = d.clone();
    let mut records = Vec::with_capacity(k);
    for &i in &selected {
        let op = match spec.op_policy {
            OpPolicy::Erode => MorphOp::Erode,
            OpPolicy::Dilate => MorphOp::Dilate,
            OpPolicy::RandomEither => {
                if rng.random_bool(0.5) {
                    MorphOp::Erode
                } else {
                    MorphOp::Dilate
                }
            }
        };
        let radius = rng.random_range(spec.radius_min..=spec.radius_max);
        let sample = &mut out.samples[i];
        let clean = sample.masks.clone();
        let mut emptied = Vec::new();
        let channels = clean
            .channels
            .iter()
            .zip(&clean.class_names)
            .map(|(ch, name)| {
                let noisy = match op {
                    MorphOp::Erode => erode(ch, radius)?,
                    MorphOp::Dilate => dilate(ch, radius)?,
                };
                if ch.iter().any(|&v| v == 1) && noisy.iter().all(|&v| v == 0) {
                    emptied.push(name.clone());
                }
                Ok(noisy)
            })
            .collect::<Result<Vec<_>>>()?;
        sample.masks = MaskSet::new(channels, clean.class_names.clone())?;
        sample.clean_masks = Some(clean);
        sample.corrupted = true;
        sample.validate()?;
        records.push(CorruptionRecord {
            sample_id: sample.id.clone(),
            op,
            radius,
            emptied_classes: emptied,
        });
    }
    out.validate()?;
    Ok((out, records))
}
