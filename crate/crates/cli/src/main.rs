use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynode_cli::{commands, exit, CliError, ExperimentConfig, ReproTarget};
use dynode_core::envs::EnvKind;

#[derive(Parser)]
#[command(name = "dynode", version, about = "Collect data, train and evaluate dynamics models, and run model-based agents")]
struct Cli {
    /// TOML experiment config; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of `experiment.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `experiment.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Environment (overrides `experiment.env`).
    #[arg(long, global = true, value_parser = parse_env)]
    env: Option<EnvKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect random-policy datasets for every budget and seed.
    Collect,
    /// Train every configured model on every budget and seed.
    TrainModel,
    /// Score trained models and write the MPE table and figures.
    Eval,
    /// Train agents and write learning curves.
    Rl {
        /// Continue from existing agent checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Run a reproduction target end to end.
    Repro {
        #[arg(value_enum)]
        target: ReproTarget,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn parse_env(s: &str) -> Result<EnvKind, String> {
    s.parse().map_err(|e: dynode_core::Error| e.to_string())
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.experiment.out = out.clone();
    }
    if let Some(env) = cli.env {
        cfg.experiment.env = env;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Collect => {
            commands::collect(&cfg)?;
        }
        Command::TrainModel => {
            commands::train_models(&cfg)?;
        }
        Command::Eval => {
            let report = commands::eval(&cfg)?;
            for row in report.table() {
                println!("{:<18} {:<13} n={:<5} mpe {:.5} ± {:.5}", row.env, row.model, row.samples, row.mean, row.std);
            }
        }
        Command::Rl { resume } => {
            for r in commands::rl(&cfg, *resume)? {
                println!("{:<11} seed {:<3} final return {:.2}", r.variant, r.seed, r.final_return);
            }
        }
        Command::Repro { target } => {
            for dir in commands::repro(&cfg, *target)? {
                println!("{}", dir.display());
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
