//! Acceptance gate for the framework, one test per criterion.
//!
//! 1–5 are property checks over the math core and run in seconds. 6–8 share
//! four fixed-seed desk-scale training runs (64×64 synthetic shapes,
//! 200 train / 60 test, ~10 minutes each) built once on first use; their
//! expected Dice values were frozen from the first oracle run of this exact
//! configuration and guard against regressions since. 9 reproduces the
//! full-scale chest-radiograph experiment and is skipped unless the corpus
//! is installed.

use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use pal_core::corruption::{corrupt, dilate, erode, NoiseSpec, OpPolicy};
use pal_core::datasets::jsrt::{load_jsrt, ClassGrouping};
use pal_core::datasets::{
    batch_iterator, generate_synthetic, load_dataset, resize_dataset, save_dataset, split,
    Dataset, SplitSpec,
};
use pal_core::evaluation::dice;
use pal_core::models::{stack_batch, ModelProfile, SegNet};
use pal_core::nn::{bce_with_logits, zero_grads, Adam, HasParams};
use pal_core::reweighting::{
    combine_loss, compute_weights, loss_grad_wrt_scores, max_weight_ratio, OcmConfig,
    PerSampleLosses, RawScores, Strategy,
};
use pal_core::training::{train, TrainConfig, WeightStats, WEIGHT_STATS_FILE};

const LAMBDA: f64 = 2.0;

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xACCE97 ^ salt)
}

fn random_scores(rng: &mut ChaCha8Rng, b: usize, lo: f64, hi: f64) -> RawScores<f64> {
    RawScores::new(Array1::from_shape_fn(b, |_| rng.random_range(lo..=hi))).expect("finite scores")
}

#[test]
fn criterion_1_weights_form_a_simplex_with_bounded_ratio() {
    let cfg = OcmConfig { lambda: LAMBDA };
    let ratio_bound = (2.0 * LAMBDA).exp() + 1e-6;
    let mut rng = rng(1);
    for _ in 0..10_000 {
        let b = rng.random_range(1..=64);
        let scores = random_scores(&mut rng, b, -1e9, 1e9);
        let w = compute_weights(&scores, Strategy::QamOcm, &cfg).expect("weights");
        assert!(w.0.iter().all(|&x| (0.0..=1.0).contains(&x)), "weight outside [0,1]");
        let sum: f64 = w.0.sum();
        assert!((sum - 1.0).abs() <= 1e-6, "weights sum to {sum}");
        let ratio = max_weight_ratio(&w).expect("positive weights");
        assert!(ratio <= ratio_bound, "ratio {ratio} exceeds {ratio_bound}");
    }
    println!("acceptance 1 PASS — 10000 random batches: weights in [0,1], sum 1 ± 1e-6, ratio ≤ e^4 + 1e-6");
}

#[test]
fn criterion_2_analytic_score_gradient_matches_finite_differences() {
    let cfg = OcmConfig { lambda: LAMBDA };
    let mut rng = rng(2);
    let mut max_rel = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(2..=16);
        let scores = random_scores(&mut rng, b, -2.5, 2.5);
        let losses = PerSampleLosses::new(Array1::from_shape_fn(b, |_| {
            rng.random_range(0.01..=4.0)
        }))
        .expect("nonnegative losses");
        for strategy in [Strategy::QamOcm, Strategy::Qam] {
            let analytic =
                loss_grad_wrt_scores(&scores, &losses, strategy, &cfg).expect("gradient");
            let f = |v: Array1<f64>| -> f64 {
                let w = compute_weights(&RawScores::new(v).expect("scores"), strategy, &cfg)
                    .expect("weights");
                combine_loss(&w, &losses).expect("loss")
            };
            let h = 1e-6;
            let mut numeric = Array1::zeros(b);
            for j in 0..b {
                let mut up = scores.0.clone();
                let mut down = scores.0.clone();
                up[j] += h;
                down[j] -= h;
                numeric[j] = (f(up) - f(down)) / (2.0 * h);
            }
            // Relative error of the gradient vector at its own scale; a
            // per-component quotient would measure differencing noise on
            // near-zero components instead of the formula.
            let inf = |v: &Array1<f64>| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let deviation = inf(&(&analytic - &numeric));
            let scale = inf(&analytic).max(inf(&numeric)).max(1e-12);
            max_rel = max_rel.max(deviation / scale);
        }
    }
    assert!(max_rel < 1e-5, "max relative gradient error {max_rel}");
    println!("acceptance 2 PASS — analytic ∂Loss/∂t vs central differences: max relative error {max_rel:.2e} < 1e-5");
}

#[test]
fn criterion_3_constant_scores_reduce_to_unweighted_training() {
    // Constant scores make the weighted loss the plain mean.
    let mut rng = rng(3);
    for _ in 0..1_000 {
        let b = rng.random_range(1..=64);
        let c = rng.random_range(-5.0..=5.0);
        let scores = RawScores::new(Array1::from_elem(b, c)).expect("scores");
        let losses = PerSampleLosses::new(Array1::from_shape_fn(b, |_| {
            rng.random_range(0.0..=4.0)
        }))
        .expect("losses");
        let mean = losses.0.sum() / b as f64;
        for strategy in [Strategy::QamOcm, Strategy::Qam, Strategy::Baseline] {
            let w = compute_weights(&scores, strategy, &OcmConfig { lambda: LAMBDA })
                .expect("weights");
            let combined = combine_loss(&w, &losses).expect("loss");
            assert!(
                (combined - mean).abs() <= 1e-12,
                "{strategy:?}: weighted {combined} vs mean {mean}"
            );
        }
    }

    // The baseline trainer is a plain unweighted loop: same step losses and
    // bit-identical parameters over a 4-sample, 8-step fixed-seed run.
    let profile = tiny_profile();
    let d = generate_synthetic(4, 16, 1, 41).expect("train data");
    let eval = generate_synthetic(4, 16, 1, 42).expect("eval data");
    let cfg = TrainConfig {
        strategy: Strategy::Baseline,
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 8,
        lambda: LAMBDA,
        seed: 7,
        loss_kind: Default::default(),
        early_stop_patience: None,
    };
    let run = TempDir::new().expect("tempdir");
    let outcome =
        train::<f64>(&cfg, &profile, &d, &eval, None, run.path(), None).expect("training");

    let mut net = SegNet::<f64>::new(profile.segnet_config(1), cfg.seed).expect("segnet");
    let mut opt = Adam::new(cfg.learning_rate);
    let mut hand = Vec::new();
    for epoch in 0..cfg.epochs {
        for batch in batch_iterator(&d, cfg.batch_size, cfg.seed, epoch as usize).expect("batches")
        {
            let (images, masks) = stack_batch::<f64>(&d, &batch.indices, false).expect("batch");
            zero_grads(&mut net);
            let logits = net.forward(&images, true).expect("forward");
            let (losses, mut dz) = bce_with_logits(&logits, &masks);
            let b = batch.indices.len() as f64;
            hand.push(losses.sum() / b);
            dz.mapv_inplace(|g| g / b);
            net.backward(&dz);
            opt.step(&mut net);
        }
    }
    let recorded = read_step_losses(run.path());
    assert_eq!(recorded.len(), 8, "expected 8 training steps");
    for (step, (r, h)) in recorded.iter().zip(&hand).enumerate() {
        assert!((r - h).abs() <= 1e-12, "step {step}: trainer {r} vs hand loop {h}");
    }
    let mut trained = outcome.state.segnet;
    assert_eq!(
        param_snapshot(&mut trained),
        param_snapshot(&mut net),
        "parameters diverged from the plain loop"
    );
    println!("acceptance 3 PASS — constant scores ≡ mean loss (≤1e-12); baseline trainer ≡ plain loop (8 steps, bit-identical parameters)");
}

#[test]
fn criterion_4_morphology_containment_and_manifest_counts() {
    let mut rng = rng(4);
    for _ in 0..1_000 {
        let p = rng.random_range(0.05..=0.6);
        let mask = Array2::from_shape_fn((32, 32), |_| u8::from(rng.random_bool(p)));
        let r = rng.random_range(1..=13u32);
        let eroded = erode(&mask, r).expect("erode");
        let dilated = dilate(&mask, r).expect("dilate");
        for ((e, m), d) in eroded.iter().zip(mask.iter()).zip(dilated.iter()) {
            assert!(e <= m, "erosion added a pixel at r={r}");
            assert!(m <= d, "dilation removed a pixel at r={r}");
        }
    }

    let d = generate_synthetic(202, 16, 1, 44).expect("dataset");
    for (fraction, expected) in [(0.0, 0usize), (0.25, 51), (0.5, 101), (0.75, 152)] {
        let spec = NoiseSpec {
            fraction,
            radius_min: 2,
            radius_max: 4,
            op_policy: OpPolicy::RandomEither,
            seed: 9,
        };
        let (noisy, records) = corrupt(&d, &spec).expect("corrupt");
        assert_eq!(records.len(), expected, "fraction {fraction} of 202");
        let flagged = noisy.samples.iter().filter(|s| s.corrupted).count();
        assert_eq!(flagged, expected, "corrupted flags at fraction {fraction}");
    }
    println!("acceptance 4 PASS — erode ⊆ original ⊆ dilate on 1000 masks, r ∈ [1,13]; manifest counts round half up");
}

#[test]
fn criterion_5_dice_extremes_symmetry_and_hand_value() {
    let mut rng = rng(5);
    for _ in 0..1_000 {
        let p = rng.random_range(0.1..=0.9);
        let q = rng.random_range(0.1..=0.9);
        let a = Array2::from_shape_fn((16, 16), |_| u8::from(rng.random_bool(p)));
        let b = Array2::from_shape_fn((16, 16), |_| u8::from(rng.random_bool(q)));
        assert_eq!(dice(&a.view(), &a.view()).expect("dice"), 1.0, "identity");
        let complement = a.mapv(|v| 1 - v);
        assert_eq!(dice(&a.view(), &complement.view()).expect("dice"), 0.0, "disjoint");
        let ab = dice(&a.view(), &b.view()).expect("dice");
        let ba = dice(&b.view(), &a.view()).expect("dice");
        assert_eq!(ab, ba, "symmetry");
    }

    let mut pred = Array2::<u8>::zeros((8, 8));
    let mut gt = Array2::<u8>::zeros((8, 8));
    for x in 0..4 {
        pred[(0, x)] = 1; // pixels 0..4
        gt[(0, x + 2)] = 1; // pixels 2..6, overlap exactly 2
    }
    assert_eq!(dice(&pred.view(), &gt.view()).expect("dice"), 0.5);
    println!("acceptance 5 PASS — Dice: identity 1, disjoint 0, symmetric on 1000 pairs, |4|∩|4|=2 → 0.5 exactly");
}

// --- Desk-scale experiment suite -----------------------------------------
//
// Shared fixture: 200 train / 60 test synthetic shapes at 64×64, one class,
// 50% of training masks corrupted at radii 5–13, fixed seeds throughout.
// Expected values below were frozen from the first oracle run of this
// configuration; the tolerance absorbs platform-level floating-point drift.

const DESK_EPOCHS: u32 = 80;
const DESK_TRAIN_SEED: u64 = 3;
const DESK_FINAL_WINDOW: usize = 10;
const FROZEN_CLEAN_BASELINE: f64 = 0.9940360897447160;
const FROZEN_NOISY_BASELINE: f64 = 0.9104285334449393;
const FROZEN_TOLERANCE: f64 = 0.02;

struct DeskRuns {
    dir: TempDir,
    clean_baseline: f64,
    noisy_baseline: f64,
    noisy_qam: f64,
    noisy_qam_ocm: f64,
}

fn desk_noise() -> NoiseSpec {
    NoiseSpec {
        fraction: 0.5,
        radius_min: 5,
        radius_max: 13,
        op_policy: OpPolicy::RandomEither,
        seed: 9,
    }
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let profile = ModelProfile::desk();
        // Persist and reload so training sees the same 8-bit quantized
        // images a run driven through the on-disk pipeline would.
        let train_set = persisted_synthetic(dir.path(), "train", 200, 1);
        let eval_set = persisted_synthetic(dir.path(), "test", 60, 2);
        let (noisy, _) = corrupt(&train_set, &desk_noise()).expect("corrupt");

        // Criteria 6–7 compare the models at the end of the full fixed budget:
        // under label noise the baseline's test Dice peaks early and then
        // decays as it memorizes the corrupted masks, so the end of training
        // is where the effect shows. Per-epoch eval Dice oscillates by a few
        // hundredths there, so the final score is averaged over the last few
        // epochs rather than read from one arbitrary row.
        let run = |strategy: Strategy, data: &Dataset, name: &str| -> f64 {
            let mut cfg = TrainConfig::desk(strategy, DESK_TRAIN_SEED);
            cfg.epochs = DESK_EPOCHS;
            cfg.early_stop_patience = None;
            let out = dir.path().join(name);
            let outcome =
                train::<f32>(&cfg, &profile, data, &eval_set, None, &out, None).expect(name);
            let last = final_window_dice(&out);
            eprintln!(
                "acceptance fixture: {name} final Dice {last:.4} (best {:.4} at epoch {})",
                outcome.best.average, outcome.best_epoch
            );
            last
        };
        let clean_baseline = run(Strategy::Baseline, &train_set, "clean_baseline");
        let noisy_baseline = run(Strategy::Baseline, &noisy, "noisy_baseline");
        let noisy_qam = run(Strategy::Qam, &noisy, "noisy_qam");
        let noisy_qam_ocm = run(Strategy::QamOcm, &noisy, "noisy_qam_ocm");
        DeskRuns { dir, clean_baseline, noisy_baseline, noisy_qam, noisy_qam_ocm }
    })
}

fn persisted_synthetic(root: &Path, name: &str, count: usize, seed: u64) -> Dataset {
    let dir = root.join(name);
    let d = generate_synthetic(count, 64, 1, seed).expect("synthetic data");
    save_dataset(&d, &dir, Some(seed)).expect("save dataset");
    load_dataset(&dir).expect("load dataset").0
}

#[test]
fn criterion_6_label_noise_degrades_the_baseline() {
    let runs = desk_runs();
    assert!(
        runs.noisy_baseline <= runs.clean_baseline - 0.05,
        "noisy baseline {:.4} not ≥0.05 below clean baseline {:.4}",
        runs.noisy_baseline,
        runs.clean_baseline
    );
    for (name, got, frozen) in [
        ("clean baseline", runs.clean_baseline, FROZEN_CLEAN_BASELINE),
        ("noisy baseline", runs.noisy_baseline, FROZEN_NOISY_BASELINE),
    ] {
        assert!(
            (got - frozen).abs() <= FROZEN_TOLERANCE,
            "{name} Dice {got:.4} drifted from frozen {frozen:.4} (tolerance {FROZEN_TOLERANCE})"
        );
    }
    println!(
        "acceptance 6 PASS — 50% noise at radii 5–13 drops the baseline's final Dice {:.4} → {:.4} (≥ 0.05), both within ±{} of frozen values",
        runs.clean_baseline, runs.noisy_baseline, FROZEN_TOLERANCE
    );
}

#[test]
fn criterion_7_reweighting_recovers_most_of_the_clean_dice() {
    let runs = desk_runs();
    assert!(
        runs.noisy_qam_ocm > runs.noisy_baseline,
        "qam_ocm {:.4} does not beat baseline {:.4} on the corrupted set",
        runs.noisy_qam_ocm,
        runs.noisy_baseline
    );
    assert!(
        runs.clean_baseline - runs.noisy_qam_ocm <= 0.05,
        "qam_ocm {:.4} not within 0.05 of clean-trained {:.4}",
        runs.noisy_qam_ocm,
        runs.clean_baseline
    );
    if runs.noisy_qam_ocm > runs.noisy_qam && runs.noisy_qam > runs.noisy_baseline {
        println!(
            "acceptance 7 PASS — qam_ocm {:.4} > qam {:.4} > baseline {:.4}; qam_ocm within 0.05 of clean {:.4}",
            runs.noisy_qam_ocm, runs.noisy_qam, runs.noisy_baseline, runs.clean_baseline
        );
    } else {
        // Unsquashed scoring is known to be unstable; its place in the
        // ordering is reported but not enforced.
        println!(
            "acceptance 7 PASS (with warning) — qam_ocm {:.4} > baseline {:.4} and within 0.05 of clean {:.4}; soft ordering violated by qam {:.4}",
            runs.noisy_qam_ocm, runs.noisy_baseline, runs.clean_baseline, runs.noisy_qam
        );
    }
}

#[test]
fn criterion_8_clean_samples_end_up_weighted_above_noisy_ones() {
    let runs = desk_runs();
    let stats_path = runs.dir.path().join("noisy_qam_ocm").join(WEIGHT_STATS_FILE);
    let mut reader = csv::Reader::from_path(&stats_path).expect("weight stats");
    let rows: Vec<WeightStats> =
        reader.deserialize().collect::<Result<_, _>>().expect("stats rows");
    assert!(rows.len() >= 2, "need at least two logging windows");
    let first = rows.first().expect("first window");
    let last = rows.last().expect("last window");
    let (mean_clean, mean_noisy) =
        (last.mean_clean.expect("clean mean"), last.mean_noisy.expect("noisy mean"));
    assert!(
        mean_clean >= 1.5 * mean_noisy,
        "final window: clean {mean_clean:.3} < 1.5 × noisy {mean_noisy:.3}"
    );
    let (first_ratio, last_ratio) =
        (first.ratio.expect("first ratio"), last.ratio.expect("last ratio"));
    assert!(
        last_ratio > first_ratio,
        "weight ratio did not grow: {first_ratio:.3} → {last_ratio:.3}"
    );
    println!(
        "acceptance 8 PASS — final clean/noisy weight ratio {last_ratio:.2} (clean {mean_clean:.3} ≥ 1.5 × noisy {mean_noisy:.3}), grown from {first_ratio:.2}"
    );
}

#[test]
fn criterion_9_full_scale_chest_radiograph_bands() {
    let (Some(images), Some(masks)) = (
        std::env::var_os("PAL_JSRT_IMAGES"),
        std::env::var_os("PAL_JSRT_MASKS"),
    ) else {
        println!(
            "acceptance 9 SKIP — chest-radiograph corpus not installed (set PAL_JSRT_IMAGES and PAL_JSRT_MASKS to run)"
        );
        return;
    };
    let profile = ModelProfile::full();
    let (raw, stats) =
        load_jsrt(Path::new(&images), Path::new(&masks), &ClassGrouping::scr_default())
            .expect("corpus");
    eprintln!("acceptance 9: loaded {} samples ({} skipped)", stats.loaded, stats.skipped);
    let resized = resize_dataset(&raw, profile.image_size).expect("resize");
    let n = resized.samples.len() as f64;
    let spec = SplitSpec { train_fraction: 165.0 / 247.0, seed: 1 };
    let (train_set, test_set) = split(&resized, &spec).expect("split");
    eprintln!("acceptance 9: {} train / {} test", train_set.samples.len(), n as usize - train_set.samples.len());

    for (fraction, expected) in [(0.5, 0.912), (0.75, 0.892)] {
        let noise = NoiseSpec { fraction, ..desk_noise() };
        let (noisy, _) = corrupt(&train_set, &noise).expect("corrupt");
        let cfg = TrainConfig::full(Strategy::QamOcm, DESK_TRAIN_SEED);
        let out = TempDir::new().expect("tempdir");
        let outcome = train::<f32>(&cfg, &profile, &noisy, &test_set, Some(&noise), out.path(), None)
            .expect("training");
        let got = outcome.best.average;
        if (got - expected).abs() <= 0.03 {
            println!(
                "acceptance 9 PASS — qam_ocm at {:.0}% noise: Dice {got:.3} within ±0.03 of {expected}",
                fraction * 100.0
            );
        } else {
            // Non-blocking: the reference optimizer settings and seeds for
            // the published numbers are unknown.
            println!(
                "acceptance 9 WARN — qam_ocm at {:.0}% noise: Dice {got:.3} outside ±0.03 of {expected}",
                fraction * 100.0
            );
        }
    }
}

// --- helpers ---------------------------------------------------------------

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

fn param_snapshot(net: &mut SegNet<f64>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    net.visit_params("segnet", &mut |pt| {
        out.push((pt.name.clone(), pt.value.iter().copied().collect()));
    });
    out
}

fn read_step_losses(run_dir: &Path) -> Vec<f64> {
    let raw = std::fs::read_to_string(run_dir.join("steps.jsonl")).expect("steps file");
    raw.lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).expect("step record");
            v["scalar_loss"].as_f64().expect("scalar loss")
        })
        .collect()
}

fn final_window_dice(run_dir: &Path) -> f64 {
    let raw = std::fs::read_to_string(run_dir.join("metrics.csv")).expect("metrics file");
    let mut lines = raw.lines();
    let header: Vec<&str> = lines.next().expect("metrics header").split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "average_dice")
        .expect("average_dice column");
    let dice: Vec<f64> = lines
        .map(|row| row.split(',').nth(col).expect("row width").parse().expect("dice value"))
        .collect();
    let tail = &dice[dice.len().saturating_sub(DESK_FINAL_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}
