use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use popbandit_cli::{
    cmd_banditsim, cmd_compare, cmd_gradcheck, cmd_run, format_ordering, BanditSimArgs, CliError,
    Overrides,
};

#[derive(Parser)]
#[command(
    name = "popbandit",
    version,
    about = "Population-based bandit experiments on synthetic objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config.
    config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Strategy name: random, pbt, pb2-rand, pb2-mult, pb2-mix.
    #[arg(long)]
    strategy: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            strategy: self.strategy.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy for every seed; writes per-seed CSVs and a summary.
    Run(ConfigArgs),
    /// Run several strategies on the same seeds; writes a wide summary CSV.
    Compare(ConfigArgs),
    /// Check analytic GP gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate the time-varying bandit on Bernoulli arms.
    BanditSim {
        /// Number of arms.
        #[arg(long = "arms", visible_alias = "C", default_value_t = 2)]
        arms: usize,
        /// Arms played per round.
        #[arg(long = "plays", visible_alias = "B", default_value_t = 1)]
        plays: usize,
        /// Number of rounds.
        #[arg(long = "horizon", visible_alias = "T", default_value_t = 500)]
        horizon: usize,
        /// Number of change points.
        #[arg(long = "changes", visible_alias = "V", default_value_t = 0)]
        changes: usize,
        /// Number of seeds to average over.
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        /// Per-round regret CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run(args) => {
            let outcome = cmd_run(&args.config, &args.overrides())?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
        Command::Compare(args) => {
            let outcome = cmd_compare(&args.config, &args.overrides())?;
            println!("wrote {}", outcome.file.display());
            println!(
                "final mean cumulative regret: {}",
                format_ordering(&outcome.ordering)
            );
            Ok(0)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed, &mut io::stdout().lock()),
        Command::BanditSim {
            arms,
            plays,
            horizon,
            changes,
            seeds,
            out,
        } => {
            let (_, lines) = cmd_banditsim(&BanditSimArgs {
                arms,
                plays,
                horizon,
                changes,
                seeds,
                out,
            })?;
            for line in lines {
                println!("{line}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("popbandit: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
