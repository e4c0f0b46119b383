use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use guided_dml::pipeline::{
    cmd_baseline_triplet, cmd_distill, cmd_evaluate, cmd_run_all, cmd_train_gemini, MetricsConfig, PipelineConfig,
    Stage, StageFailure, StageResult,
};

#[derive(Parser)]
#[command(name = "gdml", version, about = "Guided deep metric learning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Keep only the first N training samples of each class.
    #[arg(long, value_name = "N")]
    subset_per_class: Option<usize>,
    /// Keep only the first N test samples of each class.
    #[arg(long, value_name = "N")]
    test_subset_per_class: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the multi-stream master and export its training embeddings.
    TrainGemini(RunArgs),
    /// Distill a student from exported master embeddings.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Target embeddings (default: z_hat_train.csv in the output directory).
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Score an embedding CSV.
    Evaluate {
        csv: PathBuf,
        /// Report path (default: <csv>.metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config to take metric settings from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Master training, distillation and evaluation in one go.
    RunAll {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        skip_distill: bool,
    },
    /// Train the student architecture directly with a triplet loss.
    BaselineTriplet(RunArgs),
}

fn load(args: &RunArgs) -> StageResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config).map_err(|error| StageFailure {
        stage: Stage::Config,
        error,
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    if args.subset_per_class.is_some() {
        cfg.data.train_per_class = args.subset_per_class;
    }
    if args.test_subset_per_class.is_some() {
        cfg.data.test_per_class = args.test_subset_per_class;
    }
    Ok(cfg)
}

fn metrics_from(config: Option<&Path>) -> StageResult<MetricsConfig> {
    match config {
        None => Ok(MetricsConfig::default()),
        Some(p) => PipelineConfig::load(p).map(|c| c.metrics).map_err(|error| StageFailure {
            stage: Stage::Config,
            error,
        }),
    }
}

fn run(cli: Cli) -> StageResult<()> {
    match cli.command {
        Command::TrainGemini(args) => cmd_train_gemini(&load(&args)?).map(drop),
        Command::Distill { run, targets } => cmd_distill(&load(&run)?, targets.as_deref()).map(drop),
        Command::Evaluate { csv, out, config, seed } => {
            let metrics = metrics_from(config.as_deref())?;
            let report = cmd_evaluate(&csv, out.as_deref(), &metrics, seed)?;
            println!("{}", report.to_json_untimed());
            Ok(())
        }
        Command::RunAll { run, skip_distill } => cmd_run_all(&load(&run)?, skip_distill).map(drop),
        Command::BaselineTriplet(args) => cmd_baseline_triplet(&load(&args)?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::FAILURE
        }
    }
}
