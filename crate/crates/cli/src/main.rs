//! `lvae`: data generation, training, bound verification, prediction and
//! classification for the longitudinal VAE.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
//! `LVAE_THREADS` caps the worker threads (0 or unset = one per core).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::{Context, Failure, MetricKind};

#[derive(Parser)]
#[command(name = "lvae", version, about = "Longitudinal VAE toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal data set with train/, val/ and test/ splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train encoder and decoder under a standard-normal latent prior.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding train/ (and optionally val/).
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train the model; pretrains first unless --init is given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Continue from this checkpoint (for example the output of `pretrain`).
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
    },
    /// Evaluate every KL bound on random instances; one JSON record per instance.
    VerifyBounds {
        #[command(flatten)]
        common: Common,
        /// Number of instances, seeded from --seed upwards.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        /// Record file (default: standard output).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Fill the missing entries of a split's Y.csv.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Predictive means and variances at query covariates, given train/.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Query covariates (default: test/X.csv under the data directory).
        #[arg(long, value_name = "FILE")]
        query: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Outcome probabilities for test subjects absent from training.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Per-subject `id,probability,label` CSV; the summary goes beside it.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Mean squared error of imputations or predictions against Y_truth.csv.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: MetricKind,
        /// Output of `impute` or `predict`.
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("LVAE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("LVAE_THREADS must be a non-negative integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(command: Command) -> Result<(), Failure> {
    init_threads()?;
    let ctx = |c: &Common| Context::load(c.config.as_deref(), c.seed);
    match command {
        Command::Generate { common, out } => commands::generate(ctx(&common)?, out),
        Command::Pretrain { common, data_dir, out } => commands::pretrain_cmd(ctx(&common)?, data_dir, out),
        Command::Train { common, data_dir, out, init } => commands::train_cmd(ctx(&common)?, data_dir, out, init),
        Command::VerifyBounds { common, seeds, out } => commands::verify_bounds(ctx(&common)?, seeds, out),
        Command::Impute { common, checkpoint, data_dir, split, out } => {
            commands::impute_cmd(ctx(&common)?, checkpoint, data_dir, &split, out)
        }
        Command::Predict { common, checkpoint, data_dir, query, out } => {
            commands::predict_cmd(ctx(&common)?, checkpoint, data_dir, query, out)
        }
        Command::Classify { common, checkpoint, data_dir, out } => {
            commands::classify_cmd(ctx(&common)?, checkpoint, data_dir, out)
        }
        Command::Metrics { common, kind, pred, data_dir, split } => {
            commands::metrics_cmd(ctx(&common)?, kind, pred, data_dir, &split)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
