use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use softmax_lab::config::{self, ExperimentConfig};
use softmax_lab::experiments::{self, Command};
use softmax_lab::Result;

#[derive(Parser)]
#[command(name = "softmax-lab", version, about = "Softmax attention measure experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML config, or the manifest.json of an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Append the query to the prompt before attending.
    #[arg(long, global = true)]
    include_query_in_prompt: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Empirical attention and pushforward statistics vs the Gaussian closed form.
    GaussianCheck,
    /// Analytic gradients vs central finite differences.
    CheckGradients,
    /// Deviation sweeps over prompt length with log-log rate fits.
    Concentration,
    /// Fourth-moment envelope of the infinite-prompt output.
    MomentCheck,
    /// Sub-Gaussian tail envelope of sampled tokens.
    TailCheck,
    /// Gradient flow on the infinite-prompt regression risk.
    TrainInf,
    /// Stochastic gradient flow on finite-prompt risks.
    TrainFinite,
    /// Finite vs infinite trajectories: deviation and risk table.
    Compare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GaussianCheck => Command::GaussianCheck,
            Cmd::CheckGradients => Command::CheckGradients,
            Cmd::Concentration => Command::Concentration,
            Cmd::MomentCheck => Command::MomentCheck,
            Cmd::TailCheck => Command::TailCheck,
            Cmd::TrainInf => Command::TrainInf,
            Cmd::TrainFinite => Command::TrainFinite,
            Cmd::Compare => Command::Compare,
        }
    }
}

fn resolve(cli: &Cli, command: Command) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let loaded = config::load(path)?;
            if let Some(prev) = loaded.command.filter(|c| c != command.name()) {
                log::warn!("{} was written by `{prev}`, running `{command}`", path.display());
            }
            loaded.config
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if cli.include_query_in_prompt {
        cfg.include_query_in_prompt = true;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    let outcome = resolve(&cli, command).and_then(|cfg| experiments::run(command, &cfg));
    match outcome {
        Ok(outcome) => {
            for line in experiments::describe(&outcome.report) {
                println!("{line}");
            }
            println!("wrote {}", outcome.out.display());
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.failures {
                    eprintln!("check failed: {f}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
