//! `dfdetect`: staged deepfake-detector experiments from a JSON config.
//!
//! Exit codes: 0 success, 1 other failure (including failed run
//! verification), 2 invalid configuration, 3 I/O failure, 4 missing or
//! unusable checkpoint.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plots;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepfake_core::ensemble::FusionStrategy;
use deepfake_core::synth::SynthConfig;

use crate::config::{ExperimentConfig, Overrides};
pub use crate::error::{CliError, CliResult};

pub const DATASET_ROOT_ENV: &str = "DFDETECT_DATASET_ROOT";

#[derive(Debug, Parser)]
#[command(name = "dfdetect", version, about = "Staged deepfake detector training, evaluation and robustness sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Equal,
    Optimized,
    Majority,
}

impl From<FusionArg> for FusionStrategy {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Equal => FusionStrategy::Equal,
            FusionArg::Optimized => FusionStrategy::Optimized,
            FusionArg::Majority => FusionStrategy::Majority,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of training stages (1 trains on the raw pool).
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Comma-separated attack strengths in normalized units.
    #[arg(long, value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    /// Overrides the config's dataset root.
    #[arg(long, env = DATASET_ROOT_ENV)]
    pub dataset_root: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            dataset_root: self.dataset_root.clone(),
            seed: self.seed,
            out: self.out.clone(),
            stages: self.stages,
            fusion: self.fusion.map(Into::into),
            epsilons: self.epsilons.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition the fakes and train every backbone stage by stage.
    Train(RunArgs),
    /// Score the final checkpoints on the validation split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Re-score an existing prediction CSV instead of running the models.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// FGSM robustness sweep, optionally followed by adversarial fine-tuning.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        adversarial_train: bool,
    },
    /// Write tiled Haar sub-band images for one image or a directory.
    ExtractWavelet {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 296)]
        size: usize,
    },
    /// Check a run directory against its manifest.
    VerifyRun {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seeded 5:1 synthetic dataset.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 480)]
        train: usize,
        #[arg(long, default_value_t = 120)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

/// Runs one command, printing a short summary to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let summary = commands::train(&cfg)?;
            for (name, stages) in &summary.stages {
                let last = stages.last().expect("at least one stage");
                println!("{name}: {} stages, final parameters {}", stages.len(), last.end_hash);
            }
        }
        Command::Evaluate { run, predictions } => {
            let cfg = run.resolve()?;
            let report = commands::evaluate(&cfg, predictions.as_deref())?;
            for m in report.models.iter().chain(std::iter::once(&report.ensemble)) {
                println!(
                    "{}: accuracy {:.4} auc {:.4} eer {:.4}",
                    m.name, m.metrics.accuracy, m.metrics.auc, m.metrics.eer
                );
            }
        }
        Command::Attack { run, adversarial_train } => {
            let cfg = run.resolve()?;
            let out = commands::attack(&cfg, adversarial_train)?;
            print!("{}", out.before.to_csv());
            if let Some(after) = out.after {
                println!("after adversarial training:");
                print!("{}", after.to_csv());
            }
        }
        Command::ExtractWavelet { input, out, size } => {
            let written = commands::extract_wavelet(&input, &out, size)?;
            println!("wrote {} feature images to {}", written.len(), out.display());
        }
        Command::VerifyRun { out } => {
            let diff = commands::verify_run(&out)?;
            if !diff.is_clean() {
                return Err(CliError::Verification(format!(
                    "modified {:?}, missing {:?}, unlisted {:?}",
                    diff.modified, diff.missing, diff.unlisted
                )));
            }
            println!("{}: all files match the manifest", out.display());
        }
        Command::GenerateSynthetic {
            out,
            seed,
            train,
            val,
            size,
        } => {
            let cfg = SynthConfig::imbalanced(size, train, val, seed);
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            commands::generate_synthetic(&cfg, &out)?;
            println!("wrote {} training and {} validation images to {}", train, val, out.display());
        }
    }
    Ok(())
}
