use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cst_cli::commands::{
    self, AugmentArgs, EvalArgs, ReportArgs, SynthArgs, TrainArgs,
};
use cst_cli::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "cst",
    about = "Configurable safety tuning pipeline: synthesize preference pairs, \
             augment them under paired system prompts, train, evaluate, report"
)]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override train.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override paths.out_dir from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Synthesize preference pairs from a prompts file.
    Synth(SynthArgs),
    /// Turn pairs into training tuples (two-sided or one-sided).
    Augment(AugmentArgs),
    /// Warm up and preference-tune a model on a tuples file.
    Train(TrainArgs),
    /// Generate under both system prompts and judge the results.
    Eval(EvalArgs),
    /// Tabulate one or more score files as markdown + CSV.
    Report(ReportArgs),
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.out_dir);
    match &cli.command {
        Command::Synth(args) => commands::run_synth(&cfg, args),
        Command::Augment(args) => commands::run_augment(&cfg, args),
        Command::Train(args) => commands::run_train(&cfg, args),
        Command::Eval(args) => commands::run_eval(&cfg, args),
        Command::Report(args) => commands::run_report(&cfg, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are not errors; anything else is exit 1 (the
            // code 2 that clap would use means partial success here).
            let is_help = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
