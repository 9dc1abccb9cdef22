mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deqgp::ErrorCategory;

use crate::commands::{
    CoeffsArgs, ConvergenceArgs, EigenArgs, GaussianityArgs, InferArgs, KernelArgs, SimulateArgs,
};
use crate::config::CommonArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] deqgp::Error),
    #[error("{0}")]
    NotConverged(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::NotConverged(_) => 5,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numerical => 4,
                ErrorCategory::NonConvergence => 5,
            },
        }
    }
}

/// Kernels of infinitely wide deep equilibrium networks: simulation,
/// kernel evaluation, diagnostics and GP inference.
#[derive(Debug, Parser)]
#[command(name = "deqgp", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one network's fixed point and record the residual trace.
    Simulate(SimulateArgs),
    /// Evaluate a kernel matrix over a set of inputs.
    Kernel(KernelArgs),
    /// KS tests of network outputs against the limiting Gaussian.
    Gaussianity(GaussianityArgs),
    /// Relative kernel error against width or depth.
    Convergence(ConvergenceArgs),
    /// Smallest eigenvalue of the kernel against depth.
    Eigen(EigenArgs),
    /// Hermite coefficients of the activation and the PD diagnostic.
    Coeffs(CoeffsArgs),
    /// GP classification with the limiting kernel.
    Infer(InferArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = cli
        .common
        .resolve()
        .and_then(|resolved| match &cli.command {
            Command::Simulate(a) => commands::simulate(&resolved, a),
            Command::Kernel(a) => commands::kernel(&resolved, a),
            Command::Gaussianity(a) => commands::gaussianity(&resolved, a),
            Command::Convergence(a) => commands::convergence(&resolved, a),
            Command::Eigen(a) => commands::eigen(&resolved, a),
            Command::Coeffs(a) => commands::coeffs(&resolved, a),
            Command::Infer(a) => commands::infer(&resolved, a),
        });
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
