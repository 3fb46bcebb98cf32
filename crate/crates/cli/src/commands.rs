//! Command implementations. Every command validates its inputs fully before
//! touching the filesystem, and writes only under the directory it was
//! given.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pal_core::corruption::{corrupt, CorruptionManifest, NoiseSpec};
use pal_core::datasets::{
    load_dataset, resize_dataset, save_dataset, Dataset, DATASET_MANIFEST_FILE,
};
use pal_core::datasets::generate_synthetic;
use pal_core::evaluation::{
    evaluate_segnet, results_table, DICE_REPORT_FILE, RESULTS_CSV_FILE, RESULTS_TEXT_FILE,
};
use pal_core::models::ModelProfile;
use pal_core::training::{
    self, load_checkpoint, train, TrainConfig, BEST_CHECKPOINT_DIR, FINAL_CHECKPOINT_DIR,
    METRICS_FILE, STEPS_FILE, WEIGHT_STATS_FILE,
};
use pal_core::{CoreError, Element};

use crate::{
    Cmd, CorruptArgs, EvalArgs, GridArgs, ReportArgs, SynthArgs, TrainArgs,
};
use crate::plots;

#[derive(Debug)]
pub enum CliError {
    Core(CoreError),
    /// `report` found no readable runs; maps to exit 1.
    NoRuns,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::NoRuns => f.write_str("no valid run directories"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

type CResult<T> = Result<T, CliError>;

pub fn run(cmd: Cmd) -> CResult<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a).map_err(Into::into),
        Cmd::Corrupt(a) => cmd_corrupt(a).map_err(Into::into),
        Cmd::Train(a) => cmd_train(a).map_err(Into::into),
        Cmd::TrainGrid(a) => cmd_train_grid(a).map_err(Into::into),
        Cmd::Eval(a) => cmd_eval(a).map_err(Into::into),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn cmd_synth(a: SynthArgs) -> pal_core::Result<()> {
    let d = generate_synthetic(a.count, a.size, a.classes, a.seed)?;
    save_dataset(&d, &a.out, Some(a.seed))?;
    println!("{}", a.out.join(DATASET_MANIFEST_FILE).display());
    Ok(())
}

fn cmd_corrupt(a: CorruptArgs) -> pal_core::Result<()> {
    let spec = NoiseSpec {
        fraction: a.fraction,
        radius_min: a.radius_min,
        radius_max: a.radius_max,
        op_policy: a.op_policy.into(),
        seed: a.seed,
    };
    spec.validate()?;
    let (d, manifest) = load_dataset(&a.input)?;
    let (noisy, records) = corrupt(&d, &spec)?;
    save_dataset(&noisy, &a.out, manifest.seed)?;
    let manifest = CorruptionManifest { spec, records };
    manifest.save(&a.out)?;
    println!(
        "corrupted {} of {} samples -> {}",
        manifest.records.len(),
        noisy.len(),
        a.out.display()
    );
    Ok(())
}

fn default_profile_name() -> String {
    "desk".into()
}

/// One experiment, fully reconstructable from this file: training recipe,
/// optional label corruption, dataset locations, architecture profile, and
/// the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub data: PathBuf,
    pub eval_data: PathBuf,
    #[serde(default = "default_profile_name")]
    pub profile: String,
    pub out: PathBuf,
}

impl RunConfig {
    fn validate(&self) -> pal_core::Result<()> {
        self.train.validate()?;
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        Ok(())
    }
}

fn resolve_profile(name: &str, file: Option<&Path>) -> pal_core::Result<ModelProfile> {
    match file {
        Some(p) => ModelProfile::load_all(p)?.into_iter().find(|m| m.name == name).ok_or_else(
            || CoreError::InvalidArgument(format!("no profile named {name} in {}", p.display())),
        ),
        None => ModelProfile::by_name(name),
    }
}

fn load_at_profile_size(dir: &Path, profile: &ModelProfile) -> pal_core::Result<Dataset> {
    let (d, _) = load_dataset(dir)?;
    if d.dims() != (profile.image_size, profile.image_size) {
        log::info!(
            "resizing {} from {:?} to {sz}x{sz} for profile {name}",
            dir.display(),
            d.dims(),
            sz = profile.image_size,
            name = profile.name
        );
        return resize_dataset(&d, profile.image_size);
    }
    Ok(d)
}

fn run_config<T: Element>(rc: &RunConfig, profile: &ModelProfile) -> pal_core::Result<()> {
    rc.validate()?;
    let mut train_set = load_at_profile_size(&rc.data, profile)?;
    let eval_set = load_at_profile_size(&rc.eval_data, profile)?;

    fs::create_dir_all(&rc.out).map_err(|e| CoreError::io(&rc.out, e))?;
    let noise_echo = match &rc.noise {
        Some(spec) => {
            let (noisy, records) = corrupt(&train_set, spec)?;
            train_set = noisy;
            // Keep the provenance with the run: weight plots and audits
            // need the corrupted ids even though the dataset on disk is
            // clean.
            CorruptionManifest { spec: spec.clone(), records }.save(&rc.out)?;
            Some(spec.clone())
        }
        None => CorruptionManifest::load(&rc.data)?.map(|m| m.spec),
    };

    let outcome =
        train::<T>(&rc.train, profile, &train_set, &eval_set, noise_echo.as_ref(), &rc.out, None)?;
    println!(
        "{}: best average Dice {:.4} at epoch {} ({} epochs trained) -> {}",
        rc.train.strategy.as_str(),
        outcome.best.average,
        outcome.best_epoch,
        outcome.state.epoch,
        rc.out.display()
    );
    Ok(())
}

fn dispatch_run(rc: &RunConfig, profile: &ModelProfile) -> pal_core::Result<()> {
    if pal_core::test_mode() {
        run_config::<f64>(rc, profile)
    } else {
        run_config::<f32>(rc, profile)
    }
}

fn base_train_config(profile: &str, strategy: pal_core::reweighting::Strategy, seed: u64) -> TrainConfig {
    if profile == "full" {
        TrainConfig::full(strategy, seed)
    } else {
        TrainConfig::desk(strategy, seed)
    }
}

fn cmd_train(a: TrainArgs) -> pal_core::Result<()> {
    let rc = match &a.config {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
            serde_json::from_str::<RunConfig>(&raw).map_err(|e| {
                CoreError::InvalidArgument(format!("{}: {e}", path.display()))
            })?
        }
        None => {
            let strategy = a.strategy.expect("clap enforces --strategy").into();
            let mut t = base_train_config(&a.profile, strategy, a.seed);
            if let Some(e) = a.epochs {
                t.epochs = e;
            }
            if let Some(b) = a.batch_size {
                t.batch_size = b;
            }
            if let Some(lr) = a.learning_rate {
                t.learning_rate = lr;
            }
            if let Some(l) = a.lambda {
                t.lambda = l;
            }
            if a.fixed_epochs {
                t.early_stop_patience = None;
            }
            let noise = a.noise_fraction.map(|fraction| NoiseSpec {
                fraction,
                radius_min: a.radius_min,
                radius_max: a.radius_max,
                op_policy: a.op_policy.into(),
                seed: a.noise_seed.unwrap_or(a.seed),
            });
            RunConfig {
                train: t,
                noise,
                data: a.data.clone().expect("clap enforces --data"),
                eval_data: a.eval_data.clone().expect("clap enforces --eval-data"),
                profile: a.profile.clone(),
                out: a.out.clone().expect("clap enforces --out"),
            }
        }
    };
    let profile = resolve_profile(&rc.profile, a.profiles_file.as_deref())?;
    dispatch_run(&rc, &profile)
}

fn cmd_train_grid(a: GridArgs) -> pal_core::Result<()> {
    let profile = resolve_profile(&a.profile, a.profiles_file.as_deref())?;
    let total = a.strategies.len() * a.fractions.len();
    let mut cell = 0;
    for &strategy_arg in &a.strategies {
        let strategy: pal_core::reweighting::Strategy = strategy_arg.into();
        for &fraction in &a.fractions {
            cell += 1;
            let name = format!("{}_{:03}", strategy.as_str(), (fraction * 100.0).round() as u32);
            let mut t = base_train_config(&a.profile, strategy, a.seed);
            if let Some(e) = a.epochs {
                t.epochs = e;
            }
            if let Some(b) = a.batch_size {
                t.batch_size = b;
            }
            if let Some(lr) = a.learning_rate {
                t.learning_rate = lr;
            }
            if a.fixed_epochs {
                t.early_stop_patience = None;
            }
            // The corruption seed is shared across strategies so every cell
            // of a fraction row trains against the identical noisy labels.
            let noise = (fraction > 0.0).then(|| NoiseSpec {
                fraction,
                radius_min: a.radius_min,
                radius_max: a.radius_max,
                op_policy: pal_core::corruption::OpPolicy::RandomEither,
                seed: a.seed,
            });
            let rc = RunConfig {
                train: t,
                noise,
                data: a.data.clone(),
                eval_data: a.eval_data.clone(),
                profile: a.profile.clone(),
                out: a.out.join(&name),
            };
            println!("[{cell}/{total}] {name}");
            dispatch_run(&rc, &profile)?;
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> pal_core::Result<()> {
    let config_path = a.run.join(training::CONFIG_FILE);
    let raw = fs::read_to_string(&config_path).map_err(|e| CoreError::io(&config_path, e))?;
    let echo: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| CoreError::json(&config_path, e))?;
    let profile_name = echo["profile_name"].as_str().ok_or_else(|| {
        CoreError::InvalidArgument(format!("{}: missing profile_name", config_path.display()))
    })?;
    let profile = resolve_profile(profile_name, a.profiles_file.as_deref())?;
    let ckpt_dir = match a.checkpoint.as_str() {
        "best" => a.run.join(BEST_CHECKPOINT_DIR),
        "final" => a.run.join(FINAL_CHECKPOINT_DIR),
        other => {
            return Err(CoreError::InvalidArgument(format!(
                "--checkpoint must be 'best' or 'final', got {other}"
            )))
        }
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.join(DICE_REPORT_FILE));

    fn eval_as<T: Element>(
        ckpt_dir: &Path,
        profile: &ModelProfile,
        data: &Path,
        out: &Path,
    ) -> pal_core::Result<()> {
        let (mut state, meta) = load_checkpoint::<T>(ckpt_dir, profile)?;
        let eval_set = load_at_profile_size(data, profile)?;
        let report = evaluate_segnet(&mut state.segnet, &eval_set, meta.train.batch_size)?;
        report.save(out)?;
        for c in &report.per_class {
            println!("{}: {:.4}", c.class, c.dice);
        }
        println!("average: {:.4}", report.average);
        Ok(())
    }
    if pal_core::test_mode() {
        eval_as::<f64>(&ckpt_dir, &profile, &a.data, &out)
    } else {
        eval_as::<f32>(&ckpt_dir, &profile, &a.data, &out)
    }
}

/// Weight-dynamics plots only make sense for strategies that re-weight;
/// baseline weights are uniform by construction.
fn run_uses_qam(run: &Path) -> bool {
    let read = || -> Option<bool> {
        let raw = fs::read_to_string(run.join(training::CONFIG_FILE)).ok()?;
        let v: serde_json::Value = serde_json::from_str(&raw).ok()?;
        Some(v["train"]["strategy"].as_str()? != "baseline")
    };
    read().unwrap_or(true)
}

fn cmd_report(a: ReportArgs) -> CResult<()> {
    let table = results_table(&a.runs).map_err(CliError::Core)?;
    if table.rows.is_empty() {
        return Err(CliError::NoRuns);
    }
    let io_err = |p: &Path, e: std::io::Error| CliError::Core(CoreError::io(p, e));
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let csv_path = a.out.join(RESULTS_CSV_FILE);
    fs::write(&csv_path, table.to_csv().map_err(CliError::Core)?)
        .map_err(|e| io_err(&csv_path, e))?;
    let text = table.to_text();
    let text_path = a.out.join(RESULTS_TEXT_FILE);
    fs::write(&text_path, format!("{text}\n")).map_err(|e| io_err(&text_path, e))?;
    println!("{text}");

    for run in &a.runs {
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(
            || "run".to_string(),
        );
        let steps = run.join(STEPS_FILE);
        if steps.is_file() {
            plots::loss_vs_step(&steps, &a.out.join(format!("{name}_loss.svg")))
                .map_err(CliError::Core)?;
        }
        let metrics = run.join(METRICS_FILE);
        if metrics.is_file() {
            plots::dice_vs_epoch(&metrics, &a.out.join(format!("{name}_dice.svg")))
                .map_err(CliError::Core)?;
        }
        let stats = run.join(WEIGHT_STATS_FILE);
        if stats.is_file() && run_uses_qam(run) {
            plots::weight_dynamics(&stats, &a.out.join(format!("{name}_weights.svg")))
                .map_err(CliError::Core)?;
        } else if metrics.is_file() {
            println!("note: {name}: no weight dynamics to plot");
        }
    }
    println!("report -> {}", a.out.display());
    Ok(())
}
