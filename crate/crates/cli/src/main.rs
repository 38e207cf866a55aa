mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use output::Format;

#[derive(Parser)]
#[command(name = "riskflow", version, about = "Risk contributions and risk budgeting for continuous-time portfolios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo paths (for `verify`: cap per check).
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Args, Clone, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Suite, check name or id; comma separated.
    #[arg(long)]
    pub filter: Option<String>,
    /// Test hook: deliberately break a check (`convention`).
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Single-period allocations and their risk contributions.
    SinglePeriod(CommonArgs),
    /// Terminal variance against aggregated contributions for one policy.
    Contrib(CommonArgs),
    /// Solve a risk-budgeting problem.
    Budget(CommonArgs),
    /// Mean-variance contribution sweeps.
    Figure2(CommonArgs),
    /// Run the acceptance checks.
    Verify(VerifyArgs),
    /// Simulate and store a path ensemble.
    Simulate(CommonArgs),
}

/// Marker for exit code 1.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match e.downcast_ref::<riskflow::Error>() {
        Some(riskflow::Error::DegenerateMarket(_)) => 3,
        Some(riskflow::Error::Convergence { .. }) => 4,
        _ => 2,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RISKFLOW_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| riskflow::Error::InvalidArgument(format!("RISKFLOW_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::SinglePeriod(a) => commands::single_period(&a),
        Command::Contrib(a) => commands::contrib(&a),
        Command::Budget(a) => commands::budget(&a),
        Command::Figure2(a) => commands::figure2(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
