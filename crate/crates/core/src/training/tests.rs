use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::*;
use crate::corruption::{corrupt, OpPolicy};
use crate::datasets::generate_synthetic;
use crate::error::CoreError;
use crate::nn::HasParams;

fn tiny_profile() -> ModelProfile {
    ModelProfile {
        name: "tiny".into(),
        image_size: 16,
        segnet_depth: 2,
        segnet_base_width: 4,
        qam_block_widths: vec![4, 8],
        nonlinearity: "relu".into(),
        normalization: "none".into(),
        upsample: "nearest".into(),
    }
}

fn tiny_cfg(strategy: Strategy, seed: u64) -> TrainConfig {
    TrainConfig {
        strategy,
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2,
        lambda: 2.0,
        seed,
        loss_kind: LossKind::Bce,
        early_stop_patience: None,
    }
}

fn read_steps(dir: &Path) -> Vec<StepRecord> {
    fs::read_to_string(dir.join(STEPS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn snapshot(model: &mut dyn HasParams<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params("m", &mut |pt| out.extend(pt.value.iter().copied()));
    out
}

fn half_noise() -> crate::corruption::NoiseSpec {
    crate::corruption::NoiseSpec {
        fraction: 0.5,
        radius_min: 1,
        radius_max: 2,
        op_policy: OpPolicy::RandomEither,
        seed: 3,
    }
}

#[test]
fn zero_logits_cost_ln_two_per_sample() {
    let logits = Array4::<f64>::zeros((3, 2, 4, 4));
    let mut masks = Array4::<f64>::zeros((3, 2, 4, 4));
    masks[(0, 0, 1, 1)] = 1.0;
    masks[(2, 1, 3, 0)] = 1.0;
    let (losses, _) = per_sample_loss(LossKind::Bce, &logits, &masks);
    assert_eq!(losses.len(), 3);
    for &l in losses.iter() {
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "loss {l}");
    }
}

#[test]
fn baseline_equals_plain_unweighted_loop() {
    let profile = tiny_profile();
    let d = generate_synthetic(8, 16, 1, 11).unwrap();
    let eval = generate_synthetic(4, 16, 1, 12).unwrap();
    let cfg = tiny_cfg(Strategy::Baseline, 7);
    let tmp = tempfile::tempdir().unwrap();
    train::<f64>(&cfg, &profile, &d, &eval, None, tmp.path(), None).unwrap();
    let recorded: Vec<f64> = read_steps(tmp.path()).iter().map(|r| r.scalar_loss).collect();

    // Plain loop: mean loss, gradients divided by B, no quality network.
    let mut net = SegNet::<f64>::new(profile.segnet_config(1), cfg.seed).unwrap();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut hand = Vec::new();
    for epoch in 0..cfg.epochs {
        for batch in batch_iterator(&d, cfg.batch_size, cfg.seed, epoch as usize).unwrap() {
            let (images, masks) = stack_batch::<f64>(&d, &batch.indices, false).unwrap();
            zero_grads(&mut net);
            let logits = net.forward(&images, true).unwrap();
            let (losses, mut dz) = bce_with_logits(&logits, &masks);
            let b = batch.indices.len() as f64;
            hand.push(losses.sum() / b);
            dz.mapv_inplace(|g| g / b);
            net.backward(&dz);
            opt.step(&mut net);
        }
    }
    assert_eq!(recorded.len(), hand.len());
    for (r, h) in recorded.iter().zip(&hand) {
        assert!((r - h).abs() < 1e-12, "recorded {r} vs hand loop {h}");
    }
}

#[test]
fn identical_configs_reproduce_artifacts_bytewise() {
    let profile = tiny_profile();
    let clean = generate_synthetic(8, 16, 1, 21).unwrap();
    let (d, _) = corrupt(&clean, &half_noise()).unwrap();
    let eval = generate_synthetic(4, 16, 1, 22).unwrap();
    let cfg = tiny_cfg(Strategy::QamOcm, 5);
    let (ta, tb) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train::<f64>(&cfg, &profile, &d, &eval, None, ta.path(), None).unwrap();
    train::<f64>(&cfg, &profile, &d, &eval, None, tb.path(), None).unwrap();
    for file in [METRICS_FILE, STEPS_FILE, WEIGHT_STATS_FILE] {
        let a = fs::read(ta.path().join(file)).unwrap();
        let b = fs::read(tb.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn first_ocm_step_moves_quality_parameters() {
    let profile = tiny_profile();
    let d = generate_synthetic(8, 16, 1, 31).unwrap();
    let cfg = tiny_cfg(Strategy::QamOcm, 9);
    let mut state = TrainState::<f64>::new(&cfg, &profile, 1).unwrap();
    let before = snapshot(&mut state.quality.as_mut().unwrap().net);
    let batch = Batch { indices: vec![0, 1, 2, 3], partial: false };
    let record = train_step(&mut state, &d, &batch).unwrap();
    let after = snapshot(&mut state.quality.as_mut().unwrap().net);
    assert!(before.iter().zip(&after).any(|(a, b)| a != b), "QAM never updated");
    // Unequal losses drive the update; make sure the premise held.
    let losses: Vec<f64> = record.per_sample.iter().map(|p| p.loss).collect();
    assert!(losses.iter().any(|l| (l - losses[0]).abs() > 0.0));
    assert_eq!(state.global_step, 1);
}

#[test]
fn fifty_ocm_steps_reduce_the_loss() {
    let profile = tiny_profile();
    let d = generate_synthetic(16, 16, 1, 41).unwrap();
    let eval = generate_synthetic(4, 16, 1, 42).unwrap();
    let mut cfg = tiny_cfg(Strategy::QamOcm, 13);
    cfg.learning_rate = 1e-4;
    cfg.batch_size = 16;
    cfg.epochs = 50;
    let tmp = tempfile::tempdir().unwrap();
    train::<f64>(&cfg, &profile, &d, &eval, None, tmp.path(), None).unwrap();
    let steps = read_steps(tmp.path());
    assert_eq!(steps.len(), 50);
    assert!(
        steps[49].scalar_loss < steps[0].scalar_loss,
        "step 50 loss {} should undercut step 1 loss {}",
        steps[49].scalar_loss,
        steps[0].scalar_loss
    );
}

#[test]
fn loop_arithmetic_partial_batches_and_stats_rows() {
    let profile = tiny_profile();
    let clean = generate_synthetic(10, 16, 1, 51).unwrap();
    let (d, records) = corrupt(&clean, &half_noise()).unwrap();
    assert_eq!(records.len(), 5);
    let eval = generate_synthetic(4, 16, 1, 52).unwrap();
    let mut cfg = tiny_cfg(Strategy::Qam, 15);
    cfg.epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    train::<f64>(&cfg, &profile, &d, &eval, None, tmp.path(), None).unwrap();

    // 10 samples / batch 4 → steps of size 4, 4, 2.
    let steps = read_steps(tmp.path());
    assert_eq!(steps.len(), 3);
    let sizes: Vec<usize> = steps.iter().map(|r| r.per_sample.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    for r in &steps {
        r.validate(1e-9).unwrap();
    }

    // One eval row, one weight-stats window (full batches only).
    let metrics = fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 2, "header + one epoch:\n{metrics}");
    assert!(metrics.lines().next().unwrap().starts_with("epoch,split,dice_"));
    let stats = fs::read_to_string(tmp.path().join(WEIGHT_STATS_FILE)).unwrap();
    assert_eq!(stats.lines().count(), 2, "header + one window:\n{stats}");
}

#[test]
fn group_weight_arithmetic() {
    let rec = |step: u64, samples: &[(&str, f64)]| StepRecord {
        step,
        scalar_loss: 0.0,
        per_sample: samples
            .iter()
            .map(|&(id, w)| PerSampleRecord {
                sample_id: id.into(),
                raw_score: 0.0,
                weight: w,
                loss: 0.1,
                corrupted: id.starts_with('n'),
            })
            .collect(),
    };
    let noisy: HashSet<String> = ["n1".to_string()].into_iter().collect();

    // Uniform weights → relative weight 1.0 everywhere, ratio 1.
    let uniform = rec(1, &[("c1", 0.5), ("n1", 0.5)]);
    let rows = track_group_weights(&[uniform], &noisy, 2, 1);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean_clean, Some(1.0));
    assert_eq!(rows[0].mean_noisy, Some(1.0));
    assert_eq!(rows[0].ratio, Some(1.0));
    assert_eq!(rows[0].var_clean, Some(0.0));

    // w = (0.8, 0.2), B = 2 → relative 1.6 vs 0.4, ratio 4.
    let skewed = rec(2, &[("c1", 0.8), ("n1", 0.2)]);
    let rows = track_group_weights(&[skewed], &noisy, 2, 1);
    assert!((rows[0].mean_clean.unwrap() - 1.6).abs() < 1e-12);
    assert!((rows[0].mean_noisy.unwrap() - 0.4).abs() < 1e-12);
    assert!((rows[0].ratio.unwrap() - 4.0).abs() < 1e-12);

    // All-clean window → noisy side and ratio undefined.
    let all_clean = rec(3, &[("c1", 0.5), ("c2", 0.5)]);
    let rows = track_group_weights(&[all_clean], &noisy, 2, 1);
    assert_eq!(rows[0].mean_noisy, None);
    assert_eq!(rows[0].ratio, None);
    assert_eq!(rows[0].mean_clean, Some(1.0));

    // Partial batches are excluded; windows chunk the remaining records.
    let partial = rec(4, &[("c1", 1.0)]);
    let a = rec(5, &[("c1", 0.5), ("n1", 0.5)]);
    let b = rec(6, &[("c1", 0.5), ("n1", 0.5)]);
    let rows = track_group_weights(&[partial, a, b], &noisy, 2, 1);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].step, 5);
    assert_eq!(rows[1].step, 6);
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_guarded() {
    let profile = tiny_profile();
    let d = generate_synthetic(8, 16, 1, 61).unwrap();
    let eval = generate_synthetic(4, 16, 1, 62).unwrap();
    let mut cfg = tiny_cfg(Strategy::QamOcm, 17);
    cfg.epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    train::<f64>(&cfg, &profile, &d, &eval, None, tmp.path(), None).unwrap();
    let final_dir = tmp.path().join(FINAL_CHECKPOINT_DIR);

    let (mut state, meta) = load_checkpoint::<f64>(&final_dir, &profile).unwrap();
    assert_eq!(meta.epoch, 1);
    assert_eq!(meta.global_step, 2);
    let resaved = tmp.path().join("resaved");
    save_checkpoint(&mut state, &profile, 1, &resaved).unwrap();
    for file in [CHECKPOINT_BLOB_FILE, CHECKPOINT_META_FILE] {
        let a = fs::read(final_dir.join(file)).unwrap();
        let b = fs::read(resaved.join(file)).unwrap();
        assert_eq!(a, b, "{file} changed across save→load→save");
    }

    // Profile-hash mismatch refuses to load.
    let mut other = profile.clone();
    other.segnet_base_width = 8;
    let err = load_checkpoint::<f64>(&final_dir, &other).unwrap_err();
    assert!(matches!(err, CoreError::ProfileMismatch { .. }), "got {err}");

    // A truncated blob is rejected as corrupt.
    let blob_path = final_dir.join(CHECKPOINT_BLOB_FILE);
    let bytes = fs::read(&blob_path).unwrap();
    fs::write(&blob_path, &bytes[..bytes.len() - 9]).unwrap();
    let err = load_checkpoint::<f64>(&final_dir, &profile).unwrap_err();
    assert!(matches!(err, CoreError::CorruptCheckpoint { .. }), "got {err}");
}

#[test]
fn resumed_run_matches_unbroken_metrics() {
    let profile = tiny_profile();
    let clean = generate_synthetic(8, 16, 1, 71).unwrap();
    let (d, _) = corrupt(&clean, &half_noise()).unwrap();
    let eval = generate_synthetic(4, 16, 1, 72).unwrap();
    let mut unbroken_cfg = tiny_cfg(Strategy::QamOcm, 19);
    unbroken_cfg.epochs = 4;
    let ta = tempfile::tempdir().unwrap();
    train::<f64>(&unbroken_cfg, &profile, &d, &eval, None, ta.path(), None).unwrap();

    let mut first_half = unbroken_cfg.clone();
    first_half.epochs = 2;
    let tb = tempfile::tempdir().unwrap();
    train::<f64>(&first_half, &profile, &d, &eval, None, tb.path(), None).unwrap();
    let (state, _) =
        load_checkpoint::<f64>(&tb.path().join(FINAL_CHECKPOINT_DIR), &profile).unwrap();
    assert_eq!(state.epoch, 2);
    train::<f64>(&unbroken_cfg, &profile, &d, &eval, None, tb.path(), Some(state)).unwrap();

    for file in [METRICS_FILE, STEPS_FILE] {
        let a = fs::read_to_string(ta.path().join(file)).unwrap();
        let b = fs::read_to_string(tb.path().join(file)).unwrap();
        assert_eq!(a, b, "{file}: resumed run diverged from unbroken run");
    }

    // A trajectory-relevant config change is refused on resume.
    let (state, _) =
        load_checkpoint::<f64>(&tb.path().join(FINAL_CHECKPOINT_DIR), &profile).unwrap();
    let mut other = unbroken_cfg.clone();
    other.epochs = 6;
    other.seed = 99;
    let err =
        train::<f64>(&other, &profile, &d, &eval, None, tb.path(), Some(state)).unwrap_err();
    assert!(matches!(err, CoreError::InvalidArgument(_)), "got {err}");
}

#[test]
fn divergence_aborts_and_keeps_last_good_checkpoint() {
    let profile = tiny_profile();
    let d = generate_synthetic(8, 16, 1, 81).unwrap();
    let eval = generate_synthetic(4, 16, 1, 82).unwrap();
    let mut cfg = tiny_cfg(Strategy::QamOcm, 23);
    cfg.epochs = 1;
    let tmp = tempfile::tempdir().unwrap();
    train::<f64>(&cfg, &profile, &d, &eval, None, tmp.path(), None).unwrap();

    let (mut state, _) =
        load_checkpoint::<f64>(&tmp.path().join(FINAL_CHECKPOINT_DIR), &profile).unwrap();
    // Poison every parameter: a NaN only in early layers would be masked by
    // ReLU (NaN > 0 is false), so make sure the head emits NaN logits.
    state.segnet.visit_params("segnet", &mut |mut pt| pt.value.fill(f64::NAN));
    let mut extended = cfg.clone();
    extended.epochs = 2;
    let err = train::<f64>(&extended, &profile, &d, &eval, None, tmp.path(), Some(state))
        .unwrap_err();
    assert!(matches!(err, CoreError::Diverged { step: 3, .. }), "got {err}");

    // The checkpoints from the healthy portion of the run survive.
    load_checkpoint::<f64>(&tmp.path().join(BEST_CHECKPOINT_DIR), &profile).unwrap();
    load_checkpoint::<f64>(&tmp.path().join(FINAL_CHECKPOINT_DIR), &profile).unwrap();
}

#[test]
fn config_validation_and_serde_defaults() {
    let mut cfg = tiny_cfg(Strategy::Baseline, 1);
    cfg.validate().unwrap();
    cfg.learning_rate = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg(Strategy::QamOcm, 1);
    cfg.lambda = -1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg(Strategy::Qam, 1);
    cfg.early_stop_patience = Some(0);
    assert!(cfg.validate().is_err());

    let parsed: TrainConfig = serde_json::from_str(
        r#"{"strategy":"qam_ocm","batch_size":16,"epochs":120,"seed":3}"#,
    )
    .unwrap();
    assert_eq!(parsed.learning_rate, 1e-4);
    assert_eq!(parsed.lambda, 2.0);
    assert_eq!(parsed.loss_kind, LossKind::Bce);
    assert_eq!(parsed.early_stop_patience, Some(30));
    assert!(serde_json::from_str::<TrainConfig>(
        r#"{"strategy":"qam","batch_size":16,"epochs":1,"seed":3,"unknown":1}"#
    )
    .is_err());

    let desk = TrainConfig::desk(Strategy::Baseline, 4);
    assert_eq!((desk.batch_size, desk.epochs), (16, 120));
    let full = TrainConfig::full(Strategy::Baseline, 4);
    assert_eq!((full.batch_size, full.epochs), (32, 150));
}
