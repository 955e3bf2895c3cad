use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ners_core::harness::{
    collect_runs, compare, format_table, run_experiment, seed_dir, sweep, write_run, write_summary,
    ExperimentConfig, RunFailure,
};
use ners_core::sampler::SamplerKind;
use ners_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "ners", version, about = "Seeded replay-sampler experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the sampler: random, per, ero or ners.
    #[arg(long)]
    sampler: Option<SamplerKind>,
}

#[derive(Subcommand)]
enum Command {
    /// One run: the first seed of the config (or --seed).
    Run(Overrides),
    /// Every seed of the config, then a summary row.
    Sweep(Overrides),
    /// Summarize finished runs or sweeps side by side.
    Compare {
        /// Run directories or sweep directories holding seed_* runs.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the resolved config as TOML.
    Config(Overrides),
}

fn resolve(o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut config = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = o.seed {
        config.seeds = vec![seed];
    }
    if let Some(kind) = o.sampler {
        config.sampler.name = kind;
    }
    config.validate()?;
    Ok(config)
}

fn failure_code(f: &RunFailure) -> u8 {
    if f.is_divergence() {
        EXIT_DIVERGED
    } else if matches!(f.error, Error::Config(_)) {
        EXIT_CONFIG
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(f, code)) => {
            eprintln!("{f}");
            ExitCode::from(code)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Run(RunFailure, u8),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.into()),
            other => Failure::Other(other.into()),
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(o) => {
            let config = resolve(&o)?;
            let seed = config.seeds[0];
            let out = o
                .out
                .unwrap_or_else(|| seed_dir(&config.output_dir.join(config.label()), seed));
            match run_experiment(&config, seed) {
                Ok(log) => {
                    write_run(&out, &config, &log)?;
                    println!(
                        "{} seed {seed}: final return {:.3}, auc {:.3} -> {}",
                        log.label,
                        log.final_return().unwrap_or(f64::NAN),
                        log.auc().unwrap_or(f64::NAN),
                        out.display()
                    );
                    Ok(())
                }
                Err(f) => {
                    write_run(&out, &config, &f.log)
                        .context("writing the partial log")
                        .map_err(Failure::Other)?;
                    let code = failure_code(&f);
                    Err(Failure::Run(f, code))
                }
            }
        }
        Command::Sweep(o) => {
            let config = resolve(&o)?;
            let out = o.out.unwrap_or_else(|| config.output_dir.join(config.label()));
            match sweep(&config, &out) {
                Ok(logs) => {
                    let row = ners_core::harness::summarize(&config.label(), &logs)?;
                    print!("{}", format_table(&[row]));
                    Ok(())
                }
                Err(f) => {
                    let code = failure_code(&f);
                    Err(Failure::Run(f, code))
                }
            }
        }
        Command::Compare { dirs, out } => {
            let groups = collect_runs(&dirs)?;
            let rows = compare(&groups)?;
            write_summary(&out, &rows)?;
            print!("{}", format_table(&rows));
            Ok(())
        }
        Command::Config(o) => {
            print!("{}", resolve(&o)?.to_toml()?);
            Ok(())
        }
    }
}
