use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emag_lab::config::LoadedConfig;
use emag_lab::{cmd_analyze, cmd_sample, cmd_sweep, cmd_train, output_root, CliError, CliResult};

#[derive(Parser)]
#[command(name = "emag-lab", version, about = "Attention-EMA guidance laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $EMAG_LAB_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write a checkpoint with its loss curve.
    Train,
    /// Run guided sampling from a checkpoint.
    Sample,
    /// Score sampled runs against reference data.
    Analyze {
        /// Run directories written by `sample`.
        runs: Vec<PathBuf>,
    },
    /// Sample and analyze a grid of guidance scales.
    Sweep,
}

fn load(cli: &Cli) -> CliResult<LoadedConfig> {
    match &cli.config {
        Some(p) => LoadedConfig::load(p),
        None => Err(CliError::Config("--config is required".into())),
    }
}

fn run(cli: &Cli) -> CliResult<PathBuf> {
    let root = output_root(cli.out.as_deref());
    match &cli.command {
        Command::Analyze { runs } => {
            let metrics = match &cli.config {
                Some(p) => LoadedConfig::load(p)?.config.metrics.unwrap_or_default(),
                None => Default::default(),
            };
            cmd_analyze(runs, &metrics, &root)
        }
        cmd => {
            let cfg = load(cli)?;
            let seed = cli.seed.unwrap_or(cfg.config.seed);
            match cmd {
                Command::Train => cmd_train(&cfg, seed, &root),
                Command::Sample => cmd_sample(&cfg, seed, &root),
                Command::Sweep => cmd_sweep(&cfg, seed, &root, cli.jobs),
                Command::Analyze { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
