use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use postnas_core::config::ExperimentConfig;
use postnas_core::data::Split;
use postnas_core::experiment::{self, CHECKPOINT_FILE};
use postnas_core::Error;
use serde_json::json;

/// Train a super-network, search it, and evaluate the selected architecture.
#[derive(Parser)]
#[command(name = "postnas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the super-network and write the checkpoint and training log.
    Train(Common),
    /// Sample candidates from a checkpoint and write the report and best architecture.
    Search {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run directory's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the full network or a pruned architecture on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Architecture TOML; the full network when omitted.
        #[arg(long)]
        architecture: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Score every architecture of a small space.
    Enumerate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train, search, enumerate and evaluate, then write the manifest.
    Run(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidSpec(_) => 2,
        Error::Data(_) | Error::LabelOutOfRange { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn load(common: &Common) -> postnas_core::Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config, &common.overrides).map_err(|e| match e {
        Error::Io { .. } => Error::Config(vec![e.to_string()]),
        e => e,
    })
}

fn checkpoint_path(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.run_dir().join(CHECKPOINT_FILE))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn run(cli: Cli) -> postnas_core::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let (summary, path) = experiment::cmd_train(&cfg)?;
            print(json!({ "checkpoint": path, "train": summary }));
        }
        Command::Search { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint_path(&cfg, checkpoint);
            let summary = experiment::cmd_search(&cfg, &ckpt)?;
            print(json!({ "run_dir": cfg.run_dir(), "search": summary }));
        }
        Command::Eval {
            common,
            checkpoint,
            architecture,
            split,
        } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint_path(&cfg, checkpoint);
            let metrics = experiment::cmd_eval(&cfg, &ckpt, architecture.as_deref(), split.into())?;
            print(json!(metrics));
        }
        Command::Enumerate { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint_path(&cfg, checkpoint);
            let summary = experiment::cmd_enumerate(&cfg, &ckpt)?;
            print(json!({ "run_dir": cfg.run_dir(), "enumeration": summary }));
        }
        Command::Run(common) => {
            let cfg = load(&common)?;
            let manifest = experiment::cmd_run(&cfg)?;
            let dir = cfg.run_dir();
            print(json!({
                "run_dir": dir,
                "manifest": dir.join(experiment::MANIFEST_FILE),
                "results": manifest.results,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("postnas: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
