mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use circuitscope::tasks::Task;

#[derive(Parser, Debug)]
#[command(name = "circuitscope", version, about = "Circuit discovery by multi-granularity node pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON). Without it the toy defaults for --task are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config task.
    #[arg(long)]
    task: Option<Task>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model on the task.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Learn gate parameters for a frozen base model.
    Discover {
        #[command(flatten)]
        common: Common,
        /// Base model checkpoint; trained from scratch when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Binarize a mask checkpoint into a circuit.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        masks: PathBuf,
    },
    /// Score a circuit on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Circuit file from `extract`.
        #[arg(long, conflicts_with = "masks", required_unless_present = "masks")]
        circuit: Option<PathBuf>,
        /// Mask checkpoint, extracted on the fly.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Exhaustive and greedy search over coarse nodes.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = circuitscope::oracle::DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Render a circuit report from `extract` and `evaluate` outputs.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// json, markdown, csv, or all.
        #[arg(long, default_value = "all")]
        format: String,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CIRCUITSCOPE_THREADS") {
        let n: usize = v.parse().map_err(|_| commands::ConfigError(format!("CIRCUITSCOPE_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::TrainBase { common } => commands::train_base(&common),
        Command::Discover { common, model } => commands::discover(&common, model.as_deref()),
        Command::Extract { common, masks } => commands::extract(&common, &masks),
        Command::Evaluate { common, model, circuit, masks } => {
            commands::evaluate(&common, &model, circuit.as_deref(), masks.as_deref())
        }
        Command::Oracle { common, model, epsilon } => commands::oracle(&common, &model, epsilon),
        Command::Report { common, circuit, metrics, format } => commands::report(&common, &circuit, &metrics, &format),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
