use std::path::PathBuf;
use std::process::ExitCode;

use alora::commands::{self, exit_code};
use alora::experiment::RunConfig;
use alora::scoring::Scorer;
use alora::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "alora", version, about = "Gated low-rank adapter allocation on a miniature transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train, allocate ranks, and write all run artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<Scorer>,
    },
    /// Fold adapters into the base weights and write a dense checkpoint.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the final rank table of a run and write its heatmap CSV.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the same task and seeds under several scorers.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Repeat or comma-separate; at least two.
        #[arg(long = "scorer", value_delimiter = ',', required = true)]
        scorers: Vec<Scorer>,
        /// Number of seeds, counting up from the config seed (or --seed).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<&PathBuf>, scorer: Option<Scorer>) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(config)?;
    let cfg = commands::apply_overrides(cfg, seed, out.map(PathBuf::as_path), scorer);
    cfg.validate()?;
    eprintln!("resolved config:\n{}", cfg.to_json()?);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seed, out, scorer } => {
            let cfg = load(&config, seed, out.as_ref(), scorer)?;
            let summary = commands::cmd_run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Merge { checkpoint, out } => {
            let gap = commands::cmd_merge(&checkpoint, &out)?;
            println!("merged {} -> {} (max logit gap {gap:e})", checkpoint.display(), out.display());
        }
        Command::Report { run_dir, out } => {
            print!("{}", commands::cmd_report(&run_dir, out.as_deref())?);
        }
        Command::Compare { config, scorers, seeds, seed, out } => {
            let cfg = load(&config, seed, out.as_ref(), None)?;
            let first = cfg.seed();
            let seed_list: Vec<u64> = (0..seeds).map(|i| first + i).collect();
            let rows = commands::cmd_compare(&cfg, &scorers, &seed_list)?;
            for (scorer, m) in commands::median_dev_loss(&rows) {
                println!("{scorer:<12} median final dev loss {m:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
