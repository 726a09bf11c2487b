//! Command-line driver: every subcommand reads one experiment config and
//! writes its artifacts under the configured output directory.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetaug_core::pipeline::AugmenterKind;

pub use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "hetaug", version, about = "Heterogeneous data augmentation for long-tail skill routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Experiment config (TOML)
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set router.epochs=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train, test and tail-test corpora
    GenCorpus(Common),
    /// Train the enabled generators (or the ones named)
    TrainAugmenter {
        #[command(flatten)]
        common: Common,
        #[arg(long = "generator", value_parser = parse_kind)]
        generators: Vec<AugmenterKind>,
    },
    /// Build every configured augmentation set from the tail
    Augment(Common),
    /// Train a router on the training set, optionally with an augmentation set
    TrainRouter {
        #[command(flatten)]
        common: Common,
        /// Label of an augmentation set written by `augment`
        #[arg(long)]
        augmented: Option<String>,
    },
    /// Intrinsic metric tables for the trained generators
    EvalIntrinsic(Common),
    /// Baseline and augmented routers, threshold series and plots
    EvalExtrinsic(Common),
    /// Re-render the report directory from the extrinsic data file
    Report(Common),
    /// Every step above in order
    RunAll(Common),
}

fn parse_kind(s: &str) -> Result<AugmenterKind, String> {
    AugmenterKind::ALL
        .into_iter()
        .find(|k| k.as_str() == s && *k != AugmenterKind::Oversample)
        .ok_or_else(|| format!("unknown generator `{s}` (expected cvae, pcvae, mlm or seq2seq)"))
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus(c)
            | Command::Augment(c)
            | Command::EvalIntrinsic(c)
            | Command::EvalExtrinsic(c)
            | Command::Report(c)
            | Command::RunAll(c) => c,
            Command::TrainAugmenter { common, .. } | Command::TrainRouter { common, .. } => common,
        }
    }
}

/// Parses `args` and runs the subcommand. Usage and config errors exit with
/// 2, runtime failures with 1.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let common = cli.command.common();
    let cfg = match ExperimentConfig::load(&common.config, &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli.command, &cfg) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: &Command, cfg: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = vec![commands::record_config(cfg)?];
    out.extend(match command {
        Command::GenCorpus(_) => commands::gen_corpus(cfg)?,
        Command::TrainAugmenter { generators, .. } => commands::train_augmenters(cfg, generators)?,
        Command::Augment(_) => commands::augment(cfg)?,
        Command::TrainRouter { augmented, .. } => commands::train_router_cmd(cfg, augmented.as_deref())?,
        Command::EvalIntrinsic(_) => commands::eval_intrinsic(cfg)?,
        Command::EvalExtrinsic(_) => commands::eval_extrinsic(cfg)?,
        Command::Report(_) => commands::report(cfg)?,
        Command::RunAll(_) => commands::run_all(cfg)?,
    });
    Ok(out)
}
