//! Joint training of the segmentation network and the quality network.
//!
//! Each step runs the segmentation forward pass to get per-sample losses,
//! the quality network on (image, observed label) pairs to get raw scores,
//! converts scores to batch weights per the configured strategy, and
//! backpropagates the single weighted scalar through BOTH parameter sets —
//! the segmentation gradient is each sample's loss gradient scaled by its
//! weight, the quality gradient is the analytic weighted-loss gradient with
//! respect to the raw scores. Training always consumes the observed
//! (possibly corrupted) masks; evaluation always uses clean ones.
//!
//! Reproducibility: the batch schedule is a pure function of (seed, epoch),
//! so checkpoints carry no separate RNG blob — counters plus the config
//! reconstruct the exact remaining schedule, and a resumed run matches an
//! unbroken one bit-for-bit in 64-bit mode.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_BLOB_FILE, CHECKPOINT_META_FILE,
};

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::corruption::NoiseSpec;
use crate::datasets::{batch_iterator, Batch, Dataset};
use crate::error::{CoreError, Result};
use crate::evaluation::{evaluate_segnet, DiceReport, DICE_REPORT_FILE};
use crate::models::{stack_batch, ModelProfile, Qam, SegNet};
use crate::nn::{bce_with_logits, zero_grads, Adam};
use crate::reweighting::{
    combine_loss, compute_weights, loss_grad_wrt_scores, simplex_tolerance, OcmConfig,
    PerSampleLosses, RawScores, Strategy,
};
use crate::Element;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const WEIGHT_STATS_FILE: &str = "weight_stats.csv";
pub const BEST_CHECKPOINT_DIR: &str = "best";
pub const FINAL_CHECKPOINT_DIR: &str = "final";

/// Per-sample loss family. BCE is the only member; Dice stays an evaluation
/// metric so the objective and the metric remain decoupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_lambda() -> f64 {
    2.0
}

fn default_patience() -> Option<u32> {
    Some(30)
}

/// Full training recipe; (config, data) determines every artifact in 64-bit
/// mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u32,
    /// Squash amplitude λ; only read by the `qam_ocm` strategy.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_kind: LossKind,
    /// Stop after this many epochs without a new best eval Dice. `None`
    /// trains the fixed epoch budget (required for determinism and resume
    /// comparisons).
    #[serde(default = "default_patience")]
    pub early_stop_patience: Option<u32>,
}

impl TrainConfig {
    pub fn desk(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            learning_rate: default_lr(),
            batch_size: 16,
            epochs: 120,
            lambda: default_lambda(),
            seed,
            loss_kind: LossKind::Bce,
            early_stop_patience: default_patience(),
        }
    }

    pub fn full(strategy: Strategy, seed: u64) -> Self {
        Self { batch_size: 32, epochs: 150, ..Self::desk(strategy, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(CoreError::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(CoreError::InvalidArgument(
                "early_stop_patience must be at least 1 epoch when set".into(),
            ));
        }
        self.ocm().validate()
    }

    pub fn ocm(&self) -> OcmConfig {
        OcmConfig { lambda: self.lambda }
    }

    /// Fields that determine the parameter trajectory. Resuming may change
    /// the epoch budget or the stopping rule, but never these.
    fn trajectory_key(&self) -> (Strategy, u64, usize, u64, u64, LossKind) {
        (
            self.strategy,
            self.learning_rate.to_bits(),
            self.batch_size,
            self.lambda.to_bits(),
            self.seed,
            self.loss_kind,
        )
    }
}

/// The quality network with its own optimizer; present only for strategies
/// that re-weight.
#[derive(Debug, Clone)]
pub struct QualityArm<T: Element> {
    pub net: Qam<T>,
    pub opt: Adam,
}

/// Everything mutable about a run: both parameter sets, both optimizers,
/// and the loop counters. The batch schedule derives from (seed, epoch), so
/// these counters are the complete RNG state.
#[derive(Debug, Clone)]
pub struct TrainState<T: Element> {
    pub cfg: TrainConfig,
    pub segnet: SegNet<T>,
    pub seg_opt: Adam,
    pub quality: Option<QualityArm<T>>,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub global_step: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(cfg: &TrainConfig, profile: &ModelProfile, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let segnet = SegNet::new(profile.segnet_config(n_classes), cfg.seed)?;
        let quality = checkpoint::quality_arm(cfg, profile, n_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            segnet,
            seg_opt: checkpoint::fresh_adam(cfg.learning_rate),
            quality,
            epoch: 0,
            global_step: 0,
        })
    }
}

/// One sample's slice of a step: raw score t, batch weight w, loss L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerSampleRecord {
    pub sample_id: String,
    pub raw_score: f64,
    pub weight: f64,
    pub loss: f64,
    pub corrupted: bool,
}

/// Full audit record of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub scalar_loss: f64,
    pub per_sample: Vec<PerSampleRecord>,
}

impl StepRecord {
    /// Weights must form a batch simplex and losses must be nonnegative.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let sum: f64 = self.per_sample.iter().map(|p| p.weight).sum();
        if (sum - 1.0).abs() > tol {
            return Err(CoreError::InvalidArgument(format!(
                "step {}: weights sum to {sum}, not 1",
                self.step
            )));
        }
        if self.per_sample.iter().any(|p| !(p.weight >= 0.0 && p.loss >= 0.0)) {
            return Err(CoreError::InvalidArgument(format!(
                "step {}: negative weight or loss",
                self.step
            )));
        }
        Ok(())
    }
}

/// Group statistics of relative weights `w_i·B` over one logging window.
/// A group absent from the window leaves its fields (and the ratio)
/// undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    /// Last global step of the window.
    pub step: u64,
    pub mean_clean: Option<f64>,
    pub var_clean: Option<f64>,
    pub mean_noisy: Option<f64>,
    pub var_noisy: Option<f64>,
    /// mean_clean / mean_noisy; defined only when both groups are present.
    pub ratio: Option<f64>,
}

/// Per-sample losses and the per-sample loss gradients w.r.t. the logits.
/// Each loss averages over everything but the batch dimension.
pub fn per_sample_loss<T: Element>(
    kind: LossKind,
    logits: &Array4<T>,
    masks: &Array4<T>,
) -> (Array1<T>, Array4<T>) {
    match kind {
        LossKind::Bce => bce_with_logits(logits, masks),
    }
}

/// Runs one optimizer step on both networks and reports every per-sample
/// quantity. Non-finite losses abort with a divergence error.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    d: &Dataset,
    batch: &Batch,
) -> Result<StepRecord> {
    let step = state.global_step + 1;
    let cfg = state.cfg.clone();
    let diverged = |detail: String| CoreError::Diverged { step, detail };

    let (images, noisy_masks) = stack_batch::<T>(d, &batch.indices, false)?;
    zero_grads(&mut state.segnet);
    let logits = state.segnet.forward(&images, true)?;
    let (loss_arr, mut dz) = per_sample_loss(cfg.loss_kind, &logits, &noisy_masks);
    if let Some(bad) = loss_arr.iter().position(|l| !l.is_finite()) {
        return Err(diverged(format!(
            "non-finite per-sample loss for sample {}",
            d.samples[batch.indices[bad]].id
        )));
    }
    let losses = PerSampleLosses::new(loss_arr)?;

    let ocm = cfg.ocm();
    let scores = match &mut state.quality {
        Some(arm) => {
            zero_grads(&mut arm.net);
            let t = arm.net.forward_pair(&images, &noisy_masks, true)?;
            if t.iter().any(|s| !s.is_finite()) {
                return Err(diverged("non-finite quality score".into()));
            }
            RawScores::new(t)?
        }
        None => RawScores::new(Array1::zeros(batch.indices.len()))?,
    };
    let weights = compute_weights(&scores, cfg.strategy, &ocm)?;
    let scalar = combine_loss(&weights, &losses)?;
    if !scalar.is_finite() {
        return Err(diverged("non-finite combined loss".into()));
    }

    // ∂(Σ w_i L_i)/∂z_i = w_i · ∂L_i/∂z_i — scale each sample's slice.
    for (i, mut slice) in dz.outer_iter_mut().enumerate() {
        let w = weights.0[i];
        slice.mapv_inplace(|g| g * w);
    }
    state.segnet.backward(&dz);
    state.seg_opt.step(&mut state.segnet);
    if let Some(arm) = &mut state.quality {
        let dscores = loss_grad_wrt_scores(&scores, &losses, cfg.strategy, &ocm)?;
        arm.net.backward(&dscores);
        arm.opt.step(&mut arm.net);
    }

    let per_sample = batch
        .indices
        .iter()
        .enumerate()
        .map(|(i, &si)| {
            let s = &d.samples[si];
            PerSampleRecord {
                sample_id: s.id.clone(),
                raw_score: Element::to_f64(scores.0[i]),
                weight: Element::to_f64(weights.0[i]),
                loss: Element::to_f64(losses.0[i]),
                corrupted: s.corrupted,
            }
        })
        .collect();
    let record =
        StepRecord { step, scalar_loss: Element::to_f64(scalar), per_sample };
    record.validate(simplex_tolerance(T::DTYPE))?;
    state.global_step = step;
    Ok(record)
}

/// Windowed clean/noisy statistics of relative weights `w_i·B`. Partial
/// batches are skipped (their relative weights are not comparable), then the
/// remaining records are grouped into windows of `window_steps`.
pub fn track_group_weights(
    records: &[StepRecord],
    corrupted_ids: &HashSet<String>,
    batch_size: usize,
    window_steps: usize,
) -> Vec<WeightStats> {
    let full: Vec<&StepRecord> =
        records.iter().filter(|r| r.per_sample.len() == batch_size).collect();
    let window_steps = window_steps.max(1);
    full.chunks(window_steps)
        .map(|window| {
            let mut clean = Vec::new();
            let mut noisy = Vec::new();
            for rec in window {
                let b = rec.per_sample.len() as f64;
                for p in &rec.per_sample {
                    let rel = p.weight * b;
                    if corrupted_ids.contains(&p.sample_id) {
                        noisy.push(rel);
                    } else {
                        clean.push(rel);
                    }
                }
            }
            let stats = |xs: &[f64]| -> (Option<f64>, Option<f64>) {
                if xs.is_empty() {
                    return (None, None);
                }
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
                (Some(mean), Some(var))
            };
            let (mean_clean, var_clean) = stats(&clean);
            let (mean_noisy, var_noisy) = stats(&noisy);
            let ratio = match (mean_clean, mean_noisy) {
                (Some(c), Some(n)) if n > 0.0 => Some(c / n),
                _ => None,
            };
            WeightStats {
                step: window.last().map_or(0, |r| r.step),
                mean_clean,
                var_clean,
                mean_noisy,
                var_noisy,
                ratio,
            }
        })
        .collect()
}

/// Final state plus the best evaluation seen during the run.
#[derive(Debug)]
pub struct TrainOutcome<T: Element> {
    pub state: TrainState<T>,
    pub best: DiceReport,
    pub best_epoch: u32,
}

fn opt_col(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn append_writer(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn file_is_empty(path: &Path) -> bool {
    fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true)
}

/// Runs (or resumes) a full training loop, writing all run artifacts into
/// `run_dir`: `config.json`, `metrics.csv`, `steps.jsonl`,
/// `weight_stats.csv` (when the training set is marked corrupted),
/// `dice_report.json` for the best epoch, and `best/` + `final/`
/// checkpoints. On divergence the error propagates with the artifacts
/// written so far — including the last good checkpoint — left intact.
pub fn train<T: Element>(
    cfg: &TrainConfig,
    profile: &ModelProfile,
    train_set: &Dataset,
    eval_set: &Dataset,
    noise: Option<&NoiseSpec>,
    run_dir: &Path,
    resume: Option<TrainState<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.n_classes() != eval_set.n_classes() {
        return Err(CoreError::ShapeMismatch(format!(
            "train has {} classes, eval has {}",
            train_set.n_classes(),
            eval_set.n_classes()
        )));
    }
    if train_set.dims() != eval_set.dims() {
        return Err(CoreError::ShapeMismatch(format!(
            "train dims {:?} vs eval dims {:?}",
            train_set.dims(),
            eval_set.dims()
        )));
    }
    let n_classes = train_set.n_classes();
    let mut state = match resume {
        Some(mut s) => {
            if s.cfg.trajectory_key() != cfg.trajectory_key() {
                return Err(CoreError::InvalidArgument(
                    "resume state was trained under a different config".into(),
                ));
            }
            s.cfg = cfg.clone();
            s
        }
        None => TrainState::new(cfg, profile, n_classes)?,
    };
    if state.epoch >= cfg.epochs {
        return Err(CoreError::InvalidArgument(format!(
            "nothing to train: {} epochs already completed of {}",
            state.epoch, cfg.epochs
        )));
    }

    fs::create_dir_all(run_dir).map_err(|e| CoreError::io(run_dir, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    if state.epoch == 0 || !config_path.is_file() {
        #[derive(Serialize)]
        struct RunEcho<'a> {
            train: &'a TrainConfig,
            noise: Option<&'a NoiseSpec>,
            profile_name: &'a str,
            profile_hash: String,
            n_classes: usize,
        }
        let echo = RunEcho {
            train: cfg,
            noise,
            profile_name: &profile.name,
            profile_hash: profile.hash(),
            n_classes,
        };
        let json =
            serde_json::to_string_pretty(&echo).map_err(|e| CoreError::json(&config_path, e))?;
        fs::write(&config_path, json).map_err(|e| CoreError::io(&config_path, e))?;
    }

    let metrics_path = run_dir.join(METRICS_FILE);
    let write_metrics_header = file_is_empty(&metrics_path);
    let mut metrics = csv::Writer::from_writer(append_writer(&metrics_path)?);
    if write_metrics_header {
        let mut header = vec!["epoch".to_string(), "split".to_string()];
        header.extend(train_set.class_names.iter().map(|c| format!("dice_{c}")));
        header.push("average_dice".into());
        header.push("mean_loss".into());
        metrics.write_record(&header).map_err(|e| CoreError::csv(&metrics_path, e))?;
    }

    let stats_path = run_dir.join(WEIGHT_STATS_FILE);
    let corrupted: HashSet<String> =
        train_set.samples.iter().filter(|s| s.corrupted).map(|s| s.id.clone()).collect();
    let mut stats_writer = if corrupted.is_empty() {
        None
    } else {
        let write_header = file_is_empty(&stats_path);
        let mut w = csv::Writer::from_writer(append_writer(&stats_path)?);
        if write_header {
            w.write_record(["step", "mean_clean", "var_clean", "mean_noisy", "var_noisy", "ratio"])
                .map_err(|e| CoreError::csv(&stats_path, e))?;
        }
        Some(w)
    };

    let mut steps = append_writer(&run_dir.join(STEPS_FILE))?;
    let steps_path = run_dir.join(STEPS_FILE);

    let mut best: Option<(DiceReport, u32)> = None;
    let mut epochs_since_best = 0u32;
    for epoch in state.epoch..cfg.epochs {
        let batches = batch_iterator(train_set, cfg.batch_size, cfg.seed, epoch as usize)?;
        let mut records = Vec::with_capacity(batches.len());
        let mut loss_sum = 0.0f64;
        for batch in &batches {
            let record = match train_step(&mut state, train_set, batch) {
                Ok(r) => r,
                Err(e) => {
                    let _ = steps.flush();
                    let _ = metrics.flush();
                    return Err(e);
                }
            };
            loss_sum += record.scalar_loss;
            let line = serde_json::to_string(&record)
                .map_err(|e| CoreError::json(&steps_path, e))?;
            writeln!(steps, "{line}").map_err(|e| CoreError::io(&steps_path, e))?;
            records.push(record);
        }
        state.epoch = epoch + 1;

        if let Some(w) = &mut stats_writer {
            let full_count = batches.iter().filter(|b| !b.partial).count();
            for row in
                track_group_weights(&records, &corrupted, cfg.batch_size, full_count.max(1))
            {
                w.write_record([
                    row.step.to_string(),
                    opt_col(row.mean_clean),
                    opt_col(row.var_clean),
                    opt_col(row.mean_noisy),
                    opt_col(row.var_noisy),
                    opt_col(row.ratio),
                ])
                .map_err(|e| CoreError::csv(&stats_path, e))?;
            }
            w.flush().map_err(|e| CoreError::io(&stats_path, e))?;
        }

        let report = evaluate_segnet(&mut state.segnet, eval_set, cfg.batch_size)?;
        let mean_loss = loss_sum / records.len() as f64;
        let mut row = vec![state.epoch.to_string(), "eval".to_string()];
        row.extend(report.per_class.iter().map(|c| c.dice.to_string()));
        row.push(report.average.to_string());
        row.push(mean_loss.to_string());
        metrics.write_record(&row).map_err(|e| CoreError::csv(&metrics_path, e))?;
        metrics.flush().map_err(|e| CoreError::io(&metrics_path, e))?;
        steps.flush().map_err(|e| CoreError::io(&steps_path, e))?;

        let improved = best.as_ref().map_or(true, |(b, _)| report.average > b.average);
        if improved {
            best = Some((report, state.epoch));
            epochs_since_best = 0;
            save_checkpoint(&mut state, profile, n_classes, &run_dir.join(BEST_CHECKPOINT_DIR))?;
        } else {
            epochs_since_best += 1;
        }
        if let Some(patience) = cfg.early_stop_patience {
            if epochs_since_best >= patience {
                log::info!(
                    "early stop at epoch {}: no improvement for {patience} epochs",
                    state.epoch
                );
                break;
            }
        }
    }

    save_checkpoint(&mut state, profile, n_classes, &run_dir.join(FINAL_CHECKPOINT_DIR))?;
    let (best_report, best_epoch) = best.expect("at least one epoch ran");
    best_report.save(&run_dir.join(DICE_REPORT_FILE))?;
    Ok(TrainOutcome { state, best: best_report, best_epoch })
}

#[cfg(test)]
mod tests;
