//! Experiment pipeline driver: synthetic data, pretraining, projections,
//! MAP fine-tuning, posterior fitting, evaluation, and OOD analysis.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use subfit::cli::commands::{load_context, run_phase, Overrides, Phase};
use subfit::cli::PosteriorKind;

#[derive(Parser)]
#[command(
    name = "subfit",
    about = "Bayesian fine-tuning in projected low-rank subspaces",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training-set fraction in (0, 1].
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PosteriorArg {
    Map,
    Swag,
    Laplace,
}

impl From<PosteriorArg> for PosteriorKind {
    fn from(p: PosteriorArg) -> Self {
        match p {
            PosteriorArg::Map => PosteriorKind::Map,
            PosteriorArg::Swag => PosteriorKind::Swag,
            PosteriorArg::Laplace => PosteriorKind::Laplace,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Which artifacts to evaluate.
    #[arg(long, value_enum, default_value_t = PosteriorArg::Map)]
    posterior: PosteriorArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset family (train/val/test + OOD sets).
    GenData(Common),
    /// Train the base network on the pretraining task.
    Pretrain(Common),
    /// Build frozen projection pairs from the pretrained weights.
    Project(Common),
    /// MAP fine-tuning of the adapted network on the target task.
    TrainMap(Common),
    /// Fit the SWAG posterior from a constant-rate trajectory.
    FitSwag(Common),
    /// Fit the Laplace posterior at a MAP checkpoint.
    FitLaplace(Common),
    /// Evaluate accuracy/ECE/NLL and uncertainty on the test split.
    Evaluate(EvalArgs),
    /// Compare predictive entropies on in-distribution vs OOD sets.
    Ood(EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (phase, common, posterior) = match &cli.command {
        Command::GenData(c) => (Phase::GenData, c, None),
        Command::Pretrain(c) => (Phase::Pretrain, c, None),
        Command::Project(c) => (Phase::Project, c, None),
        Command::TrainMap(c) => (Phase::TrainMap, c, None),
        Command::FitSwag(c) => (Phase::FitSwag, c, None),
        Command::FitLaplace(c) => (Phase::FitLaplace, c, None),
        Command::Evaluate(e) => (Phase::Evaluate, &e.common, Some(e.posterior.into())),
        Command::Ood(e) => (Phase::Ood, &e.common, Some(e.posterior.into())),
    };
    let overrides = Overrides {
        out: common.out.clone(),
        train_fraction: common.train_fraction,
        seed: common.seed,
        posterior,
    };
    let result =
        load_context(&common.config, &overrides).and_then(|ctx| run_phase(phase, &ctx, &overrides));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("subfit {}: {err}", phase.name());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
