//! Thin command-line front end: parse arguments, load the config, hand off
//! to the library's pipeline harness, and report what was written.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use difflid::config::load_config;
use difflid::harness::{run, Command};

#[derive(Parser)]
#[command(
    name = "difflid",
    about = "Desk-scale haze lab: toy diffusion, bottleneck-feature probes, and a \
             dehazing network conditioned on frozen denoiser features.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Stage,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (JSON). Unknown keys are fatal.
    #[arg(long)]
    config: PathBuf,
    /// Run directory; every stage reads and writes under it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Stage {
    /// Generate the synthetic hazy/clean scene dataset.
    GenData(StageArgs),
    /// Train the toy denoising diffusion model on clean scenes.
    TrainDiffusion(StageArgs),
    /// Train per-timestep decoder probes on bottleneck features.
    ProbeHspace(StageArgs),
    /// Sweep timesteps, scoring content and haze separation in feature space.
    SweepHspace(StageArgs),
    /// Measure denoiser sensitivity to bottleneck replacement vs input swap.
    ReplaceProbe(StageArgs),
    /// Train the dehazing network on frozen denoiser features.
    TrainDehaze(StageArgs),
    /// Run component, feature-source, and timestep-pair ablations.
    Ablate(StageArgs),
    /// Evaluate the trained dehazer against the identity baseline.
    Eval(StageArgs),
    /// Consolidate stage outputs into the plots/ CSV bundle.
    ExportPlots(StageArgs),
}

impl Stage {
    fn split(self) -> (Command, StageArgs) {
        match self {
            Stage::GenData(a) => (Command::GenData, a),
            Stage::TrainDiffusion(a) => (Command::TrainDiffusion, a),
            Stage::ProbeHspace(a) => (Command::ProbeHspace, a),
            Stage::SweepHspace(a) => (Command::SweepHspace, a),
            Stage::ReplaceProbe(a) => (Command::ReplaceProbe, a),
            Stage::TrainDehaze(a) => (Command::TrainDehaze, a),
            Stage::Ablate(a) => (Command::Ablate, a),
            Stage::Eval(a) => (Command::Eval, a),
            Stage::ExportPlots(a) => (Command::ExportPlots, a),
        }
    }
}

fn main() -> ExitCode {
    let (command, args) = Cli::parse().command.split();
    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match run(command, &cfg, &args.out) {
        Ok(record) => {
            println!(
                "[{}] ok: {} artifacts under {} (content {})",
                record.command,
                record.artifacts.len(),
                args.out.display(),
                &record.content_hash[..12],
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
