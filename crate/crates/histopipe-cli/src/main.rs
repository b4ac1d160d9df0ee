//! Multi-command pipeline driver. Experiment parameters live in a
//! config file; the global flags only override its seed, thread cap and
//! output directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Ctx};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "histopipe",
    version,
    about = "Histopathology patch pipeline: tissue masking, grid extraction, dense-network training and whole-slide label maps"
)]
struct Cli {
    /// Run-configuration file (HISTOPIPE-CONFIG v1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap; 1 guarantees bit-reproducible output, 0 uses
    /// all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Artifact directory; relative artifact paths resolve under it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mask tissue, plan the grid and extract labeled patches.
    Extract,
    /// Add a stratified holdout or k-fold split to a manifest.
    Split,
    /// Compute dataset normalization statistics into a manifest.
    Stats,
    /// Train the dense network per the configured schedule.
    Train,
    /// Evaluate saved weights on a manifest subset.
    Evaluate,
    /// k-fold cross-validation experiment.
    Crossval,
    /// Whole-slide inference into a label map.
    Segment,
    /// Median filter and priority dilation over a label map.
    Postprocess,
    /// Merge evaluation outputs into one table.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Extract => "extract",
            Command::Split => "split",
            Command::Stats => "stats",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Crossval => "crossval",
            Command::Segment => "segment",
            Command::Postprocess => "postprocess",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    if !config_path.exists() {
        return Err(CliError::MissingInput(config_path));
    }
    let config = RunConfig::load(&config_path)?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let threads = cli.threads.or(config.threads).unwrap_or(0);
    let out = cli
        .out
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Process(format!("creating {}: {e}", out.display())))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Process(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx {
        config,
        seed,
        threads,
        out,
    };
    match cli.command {
        Command::Extract => commands::extract::run(&ctx),
        Command::Split => commands::dataset::run_split(&ctx),
        Command::Stats => commands::dataset::run_stats(&ctx),
        Command::Train => commands::training::run_train(&ctx),
        Command::Evaluate => commands::training::run_evaluate(&ctx),
        Command::Crossval => commands::training::run_crossval(&ctx),
        Command::Segment => commands::segmenting::run_segment(&ctx),
        Command::Postprocess => commands::segmenting::run_postprocess(&ctx),
        Command::Report => commands::report::run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command_name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("histopipe {command_name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
