use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mango_lab::cli::{cmd_eval, cmd_gen, cmd_report, cmd_train, ConfigFlags, RunConfig, TrainOptions};
use mango_lab::evaluation::EvalSplit;
use mango_lab::trainer::Mode;

#[derive(Parser)]
#[command(name = "mango", version, about = "Adversarial noise generator lab: suites, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Dotted KEY=VALUE, e.g. train.perturbation.beta=0.5 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let flags = ConfigFlags {
            config: self.config.clone(),
            seed: self.seed,
            mode: self.mode,
            overrides: self.overrides.clone(),
        };
        Ok(RunConfig::resolve(&flags, &|k| std::env::var(k).ok())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark suite.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model on a suite's train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Evaluate a run's checkpoint on one split.
    Eval {
        /// Run directory holding config.toml and model.ckpt.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// train|eval|lingual|reason|visual|answer|base
        #[arg(long, default_value = "eval")]
        split: EvalSplit,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare evaluated runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: EvalSplit,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { common, out, overwrite } => {
            let cfg = common.resolve()?;
            for line in cmd_gen(&cfg, &out, overwrite)? {
                println!("{line}");
            }
        }
        Command::Train {
            common,
            suite,
            out,
            overwrite,
            resume,
            until,
        } => {
            let cfg = common.resolve()?;
            let opts = TrainOptions { overwrite, resume, until };
            let (summary, timing) = cmd_train(&cfg, &suite, &out, &opts)
                .with_context(|| format!("training into {}", out.display()))?;
            println!(
                "{} step {}/{} model {} ({:.1} steps/s)",
                summary.mode.name(),
                summary.step,
                summary.total_steps,
                summary.model_hash,
                timing.steps_per_second
            );
        }
        Command::Eval { run, suite, split, out } => {
            let report = cmd_eval(&run, &suite, split, out.as_deref())?;
            for (k, v) in &report.metrics {
                println!("{k:<24} {v:.4}");
            }
        }
        Command::Report { runs, split, out } => {
            print!("{}", cmd_report(&runs, split, out.as_deref())?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
