use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dckd_cli::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dckd", version, about = "Collective knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed` and replaces `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Epoch count (overrides `epochs`).
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train the teacher with cross-entropy; keeps the best validation epoch.
    TrainTeacher,
    /// Train N students collectively from the teacher checkpoint.
    TrainDckd,
    /// Second generation: N students from the ensemble of DCKD students.
    TrainEdckd,
    /// One student distilled from the ensemble of DCKD students.
    TrainEnsembled,
    /// Top-1 / top-5 of every checkpoint on the validation split.
    Eval,
    /// Correlation numbers and accumulation profiles of every checkpoint.
    Metrics,
    /// Finite-difference check of the full objective on random instances.
    Gradcheck,
    /// Direction × method × N sweep over the seed list.
    Ablate,
    /// Every configured arm over the seed list.
    Compare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::TrainTeacher => Command::TrainTeacher,
            Cmd::TrainDckd => Command::TrainDckd,
            Cmd::TrainEdckd => Command::TrainEdckd,
            Cmd::TrainEnsembled => Command::TrainEnsembled,
            Cmd::Eval => Command::Eval,
            Cmd::Metrics => Command::Metrics,
            Cmd::Gradcheck => Command::Gradcheck,
            Cmd::Ablate => Command::Ablate,
            Cmd::Compare => Command::Compare,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path),
        None => Ok(ExperimentConfig::default()),
    }
    .and_then(|c| c.with_overrides(cli.seed, cli.epochs, cli.out.clone()));
    let result = cfg.and_then(|c| run(cli.command.into(), &c));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
