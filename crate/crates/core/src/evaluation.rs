//! Dice evaluation and results-table assembly.
//!
//! Dice = 2·|V_pred ∩ V_gt| / (|V_pred| + |V_gt|), computed per class channel
//! and macro-averaged. Two conventions are fixed here: predictions binarize
//! at probability ≥ 0.5, and two empty masks score 1.0 (perfect agreement on
//! absence — this matters when heavy erosion empties a small structure).
//! Evaluation always runs against clean labels and never consults the
//! quality network.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{CoreError, Result};
use crate::models::{stack_batch, SegNet};
use crate::nn::sigmoid;
use crate::Element;

/// Per-run Dice summary file, written into each run directory.
pub const DICE_REPORT_FILE: &str = "dice_report.json";
/// Cross-run comparison table renderings.
pub const RESULTS_CSV_FILE: &str = "results_table.csv";
pub const RESULTS_TEXT_FILE: &str = "results_table.txt";

/// Pixelwise threshold at probability ≥ `threshold`.
pub fn binarize<T: Element>(prob: &ArrayView2<'_, T>, threshold: f64) -> Result<Array2<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "threshold must lie strictly inside (0, 1), got {threshold}"
        )));
    }
    let t = T::from_f64(threshold);
    Ok(prob.mapv(|p| u8::from(p >= t)))
}

/// Dice overlap of two binary masks; 1.0 when both are empty.
pub fn dice(pred: &ArrayView2<'_, u8>, gt: &ArrayView2<'_, u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "dice on {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += usize::from(p == 1 && g == 1);
        total += usize::from(p == 1) + usize::from(g == 1);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice of one class, ordered as in the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDice {
    pub class: String,
    pub dice: f64,
}

/// Per-class Dice plus the unweighted class average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceReport {
    pub per_class: Vec<ClassDice>,
    pub average: f64,
}

impl DiceReport {
    pub fn new(per_class: Vec<ClassDice>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(CoreError::InvalidArgument("Dice report with no classes".into()));
        }
        let average = per_class.iter().map(|c| c.dice).sum::<f64>() / per_class.len() as f64;
        let report = Self { per_class, average };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let mean =
            self.per_class.iter().map(|c| c.dice).sum::<f64>() / self.per_class.len() as f64;
        if (self.average - mean).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(format!(
                "average {} is not the class mean {mean}",
                self.average
            )));
        }
        if !self.per_class.iter().all(|c| (0.0..=1.0).contains(&c.dice)) {
            return Err(CoreError::InvalidArgument("Dice outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CoreError::json(path, e))?;
        fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let report: Self = serde_json::from_str(&raw).map_err(|e| CoreError::json(path, e))?;
        report.validate()?;
        Ok(report)
    }
}

/// Evaluates a segmentation network on clean labels: per class, the mean
/// over samples of Dice(binarize(sigmoid(logits)), clean mask).
pub fn evaluate_segnet<T: Element>(
    net: &mut SegNet<T>,
    d: &Dataset,
    batch_size: usize,
) -> Result<DiceReport> {
    if d.is_empty() {
        return Err(CoreError::InvalidArgument("evaluation on an empty dataset".into()));
    }
    let batch_size = batch_size.clamp(1, d.len());
    let n_classes = d.n_classes();
    let mut sums = vec![0.0f64; n_classes];
    let indices: Vec<usize> = (0..d.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, _) = stack_batch::<T>(d, chunk, true)?;
        let logits = net.forward(&images, false)?;
        for (bi, &si) in chunk.iter().enumerate() {
            let sample = &d.samples[si];
            let gt = sample.clean_masks.as_ref().unwrap_or(&sample.masks);
            for c in 0..n_classes {
                let prob = logits
                    .slice(ndarray::s![bi, c, .., ..])
                    .mapv(sigmoid);
                let pred = binarize(&prob.view(), 0.5)?;
                sums[c] += dice(&pred.view(), &gt.channels[c].view())?;
            }
        }
    }
    let per_class = d
        .class_names
        .iter()
        .zip(&sums)
        .map(|(name, &s)| ClassDice { class: name.clone(), dice: s / d.len() as f64 })
        .collect();
    DiceReport::new(per_class)
}

/// One results-table row, keyed the way the ablation grid is organized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub noise_fraction: f64,
    /// Inclusive disk radius bounds; `None` for uncorrupted runs.
    pub radius_range: Option<(u32, u32)>,
    pub strategy: String,
    pub per_class: Vec<ClassDice>,
    pub average: f64,
}

/// Rows from completed runs, sorted by (noise_fraction, radius_range,
/// strategy).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Builds the table by reading each run directory's config echo and Dice
/// report. Runs missing either file are skipped with a warning.
pub fn results_table(run_dirs: &[PathBuf]) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let config_path = dir.join(crate::training::CONFIG_FILE);
        let report_path = dir.join(DICE_REPORT_FILE);
        if !config_path.is_file() || !report_path.is_file() {
            log::warn!("skipping run {}: missing config echo or Dice report", dir.display());
            continue;
        }
        let raw =
            fs::read_to_string(&config_path).map_err(|e| CoreError::io(&config_path, e))?;
        let echo: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| CoreError::json(&config_path, e))?;
        let strategy = echo["train"]["strategy"]
            .as_str()
            .ok_or_else(|| {
                CoreError::InvalidArgument(format!(
                    "{}: config echo lacks train.strategy",
                    config_path.display()
                ))
            })?
            .to_string();
        let (noise_fraction, radius_range) = match echo.get("noise") {
            Some(n) if !n.is_null() => {
                let fraction = n["fraction"].as_f64().unwrap_or(0.0);
                let lo = n["radius_min"].as_u64().unwrap_or(0) as u32;
                let hi = n["radius_max"].as_u64().unwrap_or(0) as u32;
                (fraction, Some((lo, hi)))
            }
            _ => (0.0, None),
        };
        let report = DiceReport::load(&report_path)?;
        rows.push(ResultRow {
            noise_fraction,
            radius_range,
            strategy,
            per_class: report.per_class,
            average: report.average,
        });
    }
    rows.sort_by(|a, b| {
        a.noise_fraction
            .total_cmp(&b.noise_fraction)
            .then(a.radius_range.cmp(&b.radius_range))
            .then(a.strategy.cmp(&b.strategy))
    });
    Ok(ResultsTable { rows })
}

impl ResultsTable {
    fn class_names(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| r.per_class.iter().map(|c| c.class.clone()).collect())
            .unwrap_or_default()
    }

    /// CSV rendering with one column per class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let classes = self.class_names();
        let mut header = vec![
            "noise_fraction".to_string(),
            "radius_range".to_string(),
            "strategy".to_string(),
        ];
        header.extend(classes.iter().cloned());
        header.push("average".into());
        w.write_record(&header).map_err(|e| CoreError::csv("<memory>", e))?;
        for row in &self.rows {
            let mut rec = vec![
                format!("{}", row.noise_fraction),
                radius_label(row.radius_range),
                row.strategy.clone(),
            ];
            for c in &row.per_class {
                rec.push(format!("{:.4}", c.dice));
            }
            rec.push(format!("{:.4}", row.average));
            w.write_record(&rec).map_err(|e| CoreError::csv("<memory>", e))?;
        }
        let bytes = w.into_inner().map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CoreError::InvalidArgument(e.to_string()))
    }

    /// Fixed-width text rendering for terminals and logs.
    pub fn to_text(&self) -> String {
        let classes = self.class_names();
        let mut header = vec!["noise".to_string(), "radii".to_string(), "strategy".to_string()];
        header.extend(classes);
        header.push("average".into());
        let mut lines: Vec<Vec<String>> = vec![header];
        for row in &self.rows {
            let mut cols = vec![
                format!("{:.0}%", row.noise_fraction * 100.0),
                radius_label(row.radius_range),
                row.strategy.clone(),
            ];
            for c in &row.per_class {
                cols.push(format!("{:.4}", c.dice));
            }
            cols.push(format!("{:.4}", row.average));
            lines.push(cols);
        }
        let n_cols = lines.iter().map(|l| l.len()).max().unwrap_or(0);
        let widths: Vec<usize> = (0..n_cols)
            .map(|i| lines.iter().filter_map(|l| l.get(i)).map(|s| s.len()).max().unwrap_or(0))
            .collect();
        lines
            .iter()
            .map(|cols| {
                cols.iter()
                    .enumerate()
                    .map(|(i, s)| format!("{:<width$}", s, width = widths[i]))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn radius_label(range: Option<(u32, u32)>) -> String {
    match range {
        Some((lo, hi)) => format!("{lo}-{hi}"),
        None => "-".into(),
    }
}
