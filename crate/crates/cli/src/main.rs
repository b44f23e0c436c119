use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use darvm::experiment::{report, run_experiment, write_population, ExperimentConfig};

#[derive(Parser)]
#[command(name = "darvm", version, about = "Domain-adapted RVM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target population and its true mapping.
    Generate(Common),
    /// Run every repeat of an experiment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Worker threads for concurrent repeats.
        #[arg(short, long)]
        workers: Option<usize>,
    },
    /// Build figure-ready tables from a finished run directory.
    Report { run_dir: PathBuf },
    /// Print the default configuration.
    DefaultConfig,
}

enum Failure {
    Config(anyhow::Error),
    Partial(usize),
    Other(anyhow::Error),
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(e.into()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = load_config(&common)?;
            let Some(mut spec) = cfg.data.synthetic_spec() else {
                return Err(Failure::Config(anyhow::anyhow!(
                    "generate needs a synthetic data source"
                )));
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            write_population(&spec, &cfg.output_dir).map_err(|e| Failure::Other(e.into()))?;
            log::info!("population written to {}", cfg.output_dir.display());
        }
        Command::Run { common, workers } => {
            let mut cfg = load_config(&common)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate().map_err(|e| Failure::Config(e.into()))?;
            let dir = cfg.output_dir.clone();
            let summary = run_experiment(&cfg, &dir).map_err(|e| match e {
                darvm::Error::Config(_) => Failure::Config(e.into()),
                e => Failure::Other(e.into()),
            })?;
            for s in &summary.strategies {
                println!(
                    "{:<12} completed {:>3}  query fraction {}  final F1 {}",
                    s.strategy,
                    s.completed,
                    fmt(s.mean_query_fraction),
                    fmt(s.mean_final_f1)
                );
            }
            println!("results in {}", dir.display());
            if !summary.failed_repeats.is_empty() {
                return Err(Failure::Partial(summary.failed_repeats.len()));
            }
        }
        Command::Report { run_dir } => {
            if !run_dir.is_dir() {
                return Err(Failure::Other(anyhow::anyhow!(
                    "{} is not a directory",
                    run_dir.display()
                )));
            }
            let index = report(&run_dir).map_err(|e| Failure::Other(e.into()))?;
            if let (Some(b), Some(w)) = (index.best_jmmd_repeat, index.worst_jmmd_repeat) {
                println!("lowest JMMD repeat {b}, highest {w}");
            }
            println!("tables in {}", run_dir.join("report").display());
        }
        Command::DefaultConfig => {
            let text = ExperimentConfig::default()
                .to_toml()
                .map_err(|e| Failure::Other(e.into()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(n)) => {
            eprintln!("{n} repeat(s) failed; see repeats.json");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
