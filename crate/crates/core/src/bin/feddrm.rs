use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use feddrm::cli::{self, ElcheckArgs};
use feddrm::Result;

#[derive(Parser)]
#[command(
    name = "feddrm",
    version,
    about = "Desk-scale federated learning with density-ratio client routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition, train and log per-round metrics.
    Run { config: PathBuf },
    /// Write the client assignment (and shifted images) without training.
    Partition { config: PathBuf },
    /// Evaluate a checkpoint on the configured data.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Empirical-likelihood duality and constraint checks on random instances.
    Elcheck {
        #[arg(long, default_value_t = 3)]
        clients: usize,
        #[arg(long, default_value_t = 8)]
        max_n: usize,
        #[arg(long, default_value_t = 2)]
        d_h: usize,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check the all-ones tilt case.
        #[arg(long)]
        degenerate: bool,
        /// Perturb the solved multipliers; the run must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Log the gradient-drift decomposition over training.
    Drift { config: PathBuf },
    /// Fixed-embedding convergence, statistical-error and lambda experiments.
    Theory { config: PathBuf },
}

fn dispatch(cmd: Command) -> Result<i32> {
    use cli::{verdict_code, EXIT_OK};
    Ok(match cmd {
        Command::Run { config } => {
            let out = cli::cmd_run(&config)?;
            println!("wrote {} and {}", out.csv.display(), out.summary.display());
            EXIT_OK
        }
        Command::Partition { config } => {
            println!("wrote {}", cli::cmd_partition(&config)?.display());
            EXIT_OK
        }
        Command::Eval { config, checkpoint } => {
            let row = cli::cmd_eval(&config, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&row).expect("row serializes"));
            EXIT_OK
        }
        Command::Elcheck {
            clients,
            max_n,
            d_h,
            instances,
            seed,
            degenerate,
            corrupt,
        } => {
            let args = ElcheckArgs {
                clients,
                max_n,
                d_h,
                instances,
                seed,
                degenerate,
                corrupt,
            };
            verdict_code(&cli::cmd_elcheck(&args, &mut std::io::stdout())?)
        }
        Command::Drift { config } => report(cli::cmd_drift(&config)?),
        Command::Theory { config } => report(cli::cmd_theory(&config)?),
    })
}

fn report(checks: Vec<cli::Check>) -> i32 {
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    cli::verdict_code(&checks)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    let result = cli::threads_from_env().and_then(|threads| cli::in_pool(threads, || dispatch(args.command))?);
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
