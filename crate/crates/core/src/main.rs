use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fmwiss::cli::{self, RunConfig};
use fmwiss::synthetic::BenchmarkConfig;
use fmwiss::Result;

#[derive(Parser)]
#[command(name = "fmwiss", version, about = "Weakly-incremental semantic segmentation toolkit")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Config overrides as dotted paths, e.g. `--train.lr 0.001`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &cli::parse_override_args(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate pseudo labels for a step's training images.
    Coseg {
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// Regenerate files that already exist.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the base model and fill the memory bank.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one incremental step.
    TrainStep {
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the validation set.
    Eval {
        #[arg(long)]
        step: usize,
        /// Defaults to the run's checkpoint for `step`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score classes absent from both prediction and ground truth as 0.
        #[arg(long)]
        count_empty: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print a summary of a memory-bank file.
    BankInspect { bank: PathBuf },
    /// Write a synthetic benchmark and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Coseg { step, force, cfg } => {
            let s = cli::cmd_coseg(&cfg.load()?, step, force)?;
            println!("{} written, {} kept", s.written, s.skipped);
        }
        Command::TrainBase { cfg } => cli::cmd_train_base(&cfg.load()?)?,
        Command::TrainStep { step, cfg } => cli::cmd_train_step(&cfg.load()?, step)?,
        Command::Eval { step, checkpoint, count_empty, cfg } => {
            print!("{}", cli::cmd_eval(&cfg.load()?, step, checkpoint.as_deref(), count_empty)?);
        }
        Command::BankInspect { bank } => println!("{}", cli::cmd_bank_inspect(&bank)?),
        Command::Synth { out, seed } => {
            let path = cli::cmd_synth(&out, &BenchmarkConfig { seed, ..Default::default() })?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
