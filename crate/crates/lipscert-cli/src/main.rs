//! `lipscert`: certification, gradient checks, training, ablations, and
//! report plotting for the Lipschitz-bounded transformer components.
//!
//! Exit codes are a stable contract: 0 = pass, 1 = domain failure
//! (divergence or certification failure), 2 = usage/validation error.

use clap::{Parser, Subcommand};

mod commands;
mod svg;

/// Domain failure (exit 1) vs usage/validation error (exit 2).
pub enum CmdError {
    Domain(String),
    Usage(String),
}

impl CmdError {
    fn exit_code(&self) -> i32 {
        match self {
            CmdError::Domain(_) => 1,
            CmdError::Usage(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Domain(m) | CmdError::Usage(m) => m,
        }
    }
}

pub type CmdResult = Result<(), CmdError>;

#[derive(Parser)]
#[command(
    name = "lipscert",
    version,
    about = "Certify Lipschitz bounds of bounded-transformer models, check gradients, train, and plot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute closed-form Lipschitz bounds, compare against empirical
    /// estimates, and emit a certification report.
    Certify(commands::certify::CertifyArgs),
    /// Check an operation's analytic gradients against finite differences.
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Train the toy model on the synthetic dataset and record metrics.
    Train(commands::train::TrainArgs),
    /// Train one run per value along an ablation axis.
    Ablate(commands::ablate::AblateArgs),
    /// Render a metrics CSV as an SVG chart.
    Report(commands::report::ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Certify(args) => commands::certify::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
        Command::Report(args) => commands::report::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

/// Thread cap from `LIPSCERT_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> Result<usize, CmdError> {
    match std::env::var("LIPSCERT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                CmdError::Usage(format!(
                    "LIPSCERT_THREADS must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}
