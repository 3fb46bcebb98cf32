//! `pal` — config-driven command line for the full experiment lifecycle:
//! synthesize or ingest data, corrupt labels, train, evaluate, report.
//!
//! Exit codes: 0 success, 1 I/O or artifact damage, 2 usage/validation,
//! 3 state conflict (e.g. corrupting twice, profile mismatch),
//! 4 training divergence. `PAL_TEST_MODE=1` switches all arithmetic to
//! deterministic 64-bit floats.

mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pal_core::corruption::OpPolicy;
use pal_core::reweighting::Strategy;
use pal_core::CoreError;

#[derive(Parser)]
#[command(name = "pal", version, about = "Noisy-label segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset
    Synth(SynthArgs),
    /// Corrupt a clean dataset's masks morphologically
    Corrupt(CorruptArgs),
    /// Train one run from flags or a JSON run config
    Train(TrainArgs),
    /// Train every (strategy, fraction) cell of an ablation grid
    TrainGrid(GridArgs),
    /// Evaluate a run's checkpoint on a dataset
    Eval(EvalArgs),
    /// Render the cross-run results table and static plots
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Baseline,
    Qam,
    #[value(name = "qam_ocm")]
    QamOcm,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Baseline => Strategy::Baseline,
            StrategyArg::Qam => Strategy::Qam,
            StrategyArg::QamOcm => Strategy::QamOcm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Erode,
    Dilate,
    #[value(name = "random_either")]
    RandomEither,
}

impl From<PolicyArg> for OpPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Erode => OpPolicy::Erode,
            PolicyArg::Dilate => OpPolicy::Dilate,
            PolicyArg::RandomEither => OpPolicy::RandomEither,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples
    #[arg(long)]
    count: usize,
    /// Square image side in pixels
    #[arg(long)]
    size: usize,
    /// Mask channels per sample
    #[arg(long, default_value_t = 1)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    /// Clean input dataset directory
    #[arg(long = "in")]
    input: PathBuf,
    /// Output dataset directory (with corruption manifest)
    #[arg(long)]
    out: PathBuf,
    /// Fraction of samples to corrupt, in [0, 1]
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 5)]
    radius_min: u32,
    #[arg(long, default_value_t = 13)]
    radius_max: u32,
    #[arg(long, value_enum, default_value_t = PolicyArg::RandomEither)]
    op_policy: PolicyArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; replaces the individual flags below
    #[arg(long, conflicts_with_all = ["strategy", "data", "eval_data", "out"])]
    config: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "config")]
    strategy: Option<StrategyArg>,
    /// Training dataset directory
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    /// Evaluation dataset directory (clean labels)
    #[arg(long, required_unless_present = "config")]
    eval_data: Option<PathBuf>,
    /// Run output directory
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// Model profile name
    #[arg(long, default_value = "desk")]
    profile: String,
    /// JSON array of model profiles overriding the built-ins
    #[arg(long)]
    profiles_file: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Train the full epoch budget; disables early stopping
    #[arg(long)]
    fixed_epochs: bool,
    /// Corrupt this fraction of the training labels before training
    #[arg(long)]
    noise_fraction: Option<f64>,
    #[arg(long, default_value_t = 5)]
    radius_min: u32,
    #[arg(long, default_value_t = 13)]
    radius_max: u32,
    #[arg(long, value_enum, default_value_t = PolicyArg::RandomEither)]
    op_policy: PolicyArg,
    /// Corruption seed; defaults to --seed
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    /// Comma-separated strategies, e.g. baseline,qam,qam_ocm
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    strategies: Vec<StrategyArg>,
    /// Comma-separated corruption fractions, e.g. 0.25,0.5,0.75
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    /// Clean training dataset directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    /// Parent directory; each cell trains into <out>/<strategy>_<pct>
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long)]
    profiles_file: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    radius_min: u32,
    #[arg(long, default_value_t = 13)]
    radius_max: u32,
    #[arg(long)]
    fixed_epochs: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding checkpoints and the config echo
    #[arg(long)]
    run: PathBuf,
    /// Which checkpoint to evaluate
    #[arg(long, default_value = "best")]
    checkpoint: String,
    /// Dataset directory to evaluate on
    #[arg(long)]
    data: PathBuf,
    /// Report destination; defaults to <run>/dice_report.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    profiles_file: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to compare
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for the table and plot files
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::Io { .. }
        | CoreError::Json { .. }
        | CoreError::Image { .. }
        | CoreError::Csv { .. }
        | CoreError::CorruptCheckpoint { .. } => 1,
        CoreError::InvalidArgument(_) | CoreError::ShapeMismatch(_) => 2,
        CoreError::AlreadyCorrupted(_) | CoreError::ProfileMismatch { .. } => 3,
        CoreError::Diverged { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::NoRuns) => {
            eprintln!("error: no valid run directories");
            ExitCode::from(1)
        }
        Err(commands::CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_contract() {
        let io = CoreError::io("x", std::io::Error::other("disk"));
        assert_eq!(exit_code(&io), 1);
        assert_eq!(exit_code(&CoreError::InvalidArgument("bad".into())), 2);
        assert_eq!(exit_code(&CoreError::ShapeMismatch("bad".into())), 2);
        assert_eq!(exit_code(&CoreError::AlreadyCorrupted("x".into())), 3);
        let mismatch = CoreError::ProfileMismatch { expected: "a".into(), found: "b".into() };
        assert_eq!(exit_code(&mismatch), 3);
        let diverged = CoreError::Diverged { step: 7, detail: "nan".into() };
        assert_eq!(exit_code(&diverged), 4);
    }
}
