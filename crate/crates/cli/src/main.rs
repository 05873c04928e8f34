//! `prguide` — run, sweep, diagnose, and train guided-diffusion
//! experiments described by a TOML config.
//!
//! Exit codes: 0 on success, 2 for configuration and usage problems
//! (unparseable config, invalid settings, missing inputs), 1 for failures
//! while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use prguide_cli::config::{Experiment, ExperimentConfig, Overrides};
use prguide_cli::runner::{self, SweepAxis};
use prguide_cli::ConfigError;

#[derive(Parser)]
#[command(
    name = "prguide",
    version,
    about = "Guided-diffusion sampling laboratory: classifier-free, consistency, and parallel-rescaled guidance over analytic and learned denoisers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured guidance mode and seed; write final grids,
    /// per-step traces, and run manifests.
    Sample(RunArgs),
    /// Rerun the experiment across values of one guidance scale and score
    /// each run into metrics.csv.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// Which scale to vary.
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated scale values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Aggregate per-step trace CSVs into stats.csv plus one histogram
    /// image per step.
    Diagnose {
        /// Directory searched recursively for trace CSVs.
        trace_dir: PathBuf,
        /// Where to write stats.csv and images (default: the trace
        /// directory itself).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the small denoiser on the analytic scenario, fine-tune a copy
    /// onto the subject references, and save both models.
    TrainToy {
        /// Path to the experiment TOML; needs [scenario] and [train].
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to run.out, then $PRGUIDE_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output root (overrides run.out and $PRGUIDE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing run.seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Comma-separated guidance modes (cfg, cg, pr), replacing run.modes.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    /// Text-guidance scale, replacing guidance.omega_text.
    #[arg(long)]
    omega_text: Option<f64>,
    /// Consistency-guidance scale, replacing guidance.omega_cons.
    #[arg(long)]
    omega_cons: Option<f64>,
    /// Number of sampling steps, replacing run.steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seeds: (!self.seed.is_empty()).then(|| self.seed.clone()),
            modes: (!self.mode.is_empty()).then(|| self.mode.clone()),
            omega_text: self.omega_text,
            omega_cons: self.omega_cons,
            steps: self.steps,
        }
    }
}

/// Loads the config, folds in the overrides, and resolves where output
/// goes — shared by every config-driven command.
fn prepare(args: &RunArgs) -> anyhow::Result<(Experiment, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    config.apply_overrides(&args.overrides());
    let out_root = config.out_root()?;
    let dir = config_dir(&args.config);
    let experiment = Experiment::build(config, &dir)?;
    Ok((experiment, out_root))
}

fn config_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    OmegaText,
    OmegaCons,
}

impl From<Axis> for SweepAxis {
    fn from(axis: Axis) -> SweepAxis {
        match axis {
            Axis::OmegaText => SweepAxis::OmegaText,
            Axis::OmegaCons => SweepAxis::OmegaCons,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Sample(args) => {
            let (experiment, out_root) = prepare(&args)?;
            runner::cmd_sample(&experiment, &out_root)
        }
        Command::Sweep { args, axis, values } => {
            let (experiment, out_root) = prepare(&args)?;
            runner::cmd_sweep(&experiment, &out_root, axis.into(), &values)
        }
        Command::Diagnose { trace_dir, out } => {
            let out_dir = out.unwrap_or_else(|| trace_dir.clone());
            runner::cmd_diagnose(&trace_dir, &out_dir)
        }
        Command::TrainToy { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_overrides(&Overrides {
                out,
                ..Overrides::default()
            });
            let out_dir = cfg.out_root()?;
            let experiment = Experiment::build(cfg, &config_dir(&config))?;
            runner::cmd_train_toy(&experiment, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if err.is::<ConfigError>() {
                eprintln!("error: {err}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {err:#}");
                ExitCode::from(1)
            }
        }
    }
}
