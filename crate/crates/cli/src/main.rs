use clap::{Args, Parser, Subcommand};
use enndola_cli::commands;
use enndola_cli::config::load_config;
use enndola_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "enndola",
    version,
    about = "Epinet-augmented contrastive decoding pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config field, e.g. --set epinet.learning_rate=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base LM on the corpus and write base.ckpt.
    TrainBase(Common),
    /// Run the frozen LM + DoLa over the docs and write pairs.cache.
    GenPairs(Common),
    /// Train the epinet on the cache; writes epinet.ckpt and metrics.
    TrainEpinet(Common),
    /// Score decoding variants on an MC dataset; writes results.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Variant to score (repeatable); defaults to all three.
        #[arg(long)]
        variant: Vec<String>,
        /// MC dataset path (overrides eval.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Decode text from a prompt under one variant.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        /// Sample from the per-step distribution instead of greedy argmax.
        #[arg(long)]
        sample: bool,
    },
    /// Render loss-curve SVG and summary CSV from metrics logs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Metrics JSONL path (repeatable); defaults to the run's log.
        #[arg(long)]
        metrics: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainBase(c) => {
            let config = load_config(&c.config, &c.set, c.seed)?;
            commands::cmd_train_base(&config, &c.config)
        }
        Command::GenPairs(c) => {
            let config = load_config(&c.config, &c.set, c.seed)?;
            commands::cmd_gen_pairs(&config, &c.config)
        }
        Command::TrainEpinet(c) => {
            let config = load_config(&c.config, &c.set, c.seed)?;
            commands::cmd_train_epinet(&config, &c.config)
        }
        Command::Eval {
            common,
            variant,
            dataset,
        } => {
            let config = load_config(&common.config, &common.set, common.seed)?;
            commands::cmd_eval(&config, &common.config, &variant, dataset.as_deref())
        }
        Command::Generate {
            common,
            variant,
            prompt,
            max_tokens,
            sample,
        } => {
            let config = load_config(&common.config, &common.set, common.seed)?;
            commands::cmd_generate(&config, &variant, &prompt, max_tokens, sample)
        }
        Command::Report { common, metrics } => {
            let config = load_config(&common.config, &common.set, common.seed)?;
            commands::cmd_report(&config, &common.config, &metrics)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
