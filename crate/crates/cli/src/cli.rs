use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::artifacts::RunDir;
use crate::commands::{cmd_basis, cmd_eval, cmd_generate, cmd_train, collect_report, report_csv};
use crate::config::{MethodName, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "deonet", version, about = "Derivative-enhanced DeepONet pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and test data (builds the basis if absent)
    Generate(StageArgs),
    /// Compute and store the reduced basis
    Basis(StageArgs),
    /// Train a model on the generated data
    Train(StageArgs),
    /// Evaluate a checkpoint on the test data
    Eval(StageArgs),
    /// Tabulate metrics of completed runs
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Kle,
    Asm,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory holding all artifacts
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Override the basis method
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Override the training seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for data generation, bases and evaluation
    #[arg(long)]
    pub threads: Option<usize>,
    /// Checkpoint to evaluate, or to resume training from
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to merge
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV output file (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl StageArgs {
    fn resolve(&self) -> Result<(RunConfig, RunDir, usize), CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(m) = self.method {
            cfg.basis.method = match m {
                MethodArg::Kle => MethodName::Kle,
                MethodArg::Asm => MethodName::Asm,
            };
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        let threads = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        std::fs::create_dir_all(&self.out)?;
        Ok((cfg, RunDir::new(&self.out), threads))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => {
            let (cfg, dir, threads) = a.resolve()?;
            let m = cmd_generate(&cfg, &dir, threads)?;
            println!(
                "generated {} training and {} test samples ({} skipped) in {}",
                m.train.n,
                m.test.n,
                m.train.skipped.len() + m.test.skipped.len(),
                dir.dataset().display()
            );
        }
        Command::Basis(a) => {
            let (cfg, dir, threads) = a.resolve()?;
            cmd_basis(&cfg, &dir, threads)?;
        }
        Command::Train(a) => {
            let (cfg, dir, _) = a.resolve()?;
            let state = cmd_train(&cfg, &dir, a.checkpoint.as_deref())?;
            println!("trained {} iterations; config hash {}", state.iteration, cfg.train_hash());
        }
        Command::Eval(a) => {
            let (cfg, dir, threads) = a.resolve()?;
            cmd_eval(&cfg, &dir, a.checkpoint.as_deref(), threads)?;
        }
        Command::Report(a) => {
            let (rows, missing) = collect_report(&a.runs)?;
            for m in &missing {
                eprintln!("skipped {}: no metrics file", m.display());
            }
            let csv = report_csv(&rows);
            match a.out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}
