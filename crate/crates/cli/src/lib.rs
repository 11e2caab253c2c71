//! Command-line front end: config parsing, solver orchestration, CSV and
//! SVG output.

// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use config::{Overrides, RunConfig, OUT_DIR_ENV};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ethena-ctl", version, about = "Optimal carry-trade control: solve, simulate, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (ETHENA_CTL_OUT takes precedence).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Simulation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// RK4 steps of the finite-horizon coefficient grid.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Monte-Carlo path count.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Skip SVG output.
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check parameter admissibility.
    Validate(CommonArgs),
    /// Solve the discounted stationary problem; writes ih_solution.csv.
    SolveIh(CommonArgs),
    /// Integrate the finite-horizon coefficients; writes fh_coefficients.csv.
    SolveFh(CommonArgs),
    /// Simulate one common-noise path pair; writes paths.csv and fig2_*.svg.
    Simulate(CommonArgs),
    /// Monte-Carlo objectives of the optimal and perturbed policies.
    Mc(CommonArgs),
    /// Run the residual and consistency checks.
    Verify(CommonArgs),
    /// Plot the finite-horizon gains against the stationary ones.
    PlotGamma(CommonArgs),
    /// solve-ih, solve-fh, plot-gamma, simulate and verify in sequence.
    Reproduce(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Validate(a)
            | Command::SolveIh(a)
            | Command::SolveFh(a)
            | Command::Simulate(a)
            | Command::Mc(a)
            | Command::Verify(a)
            | Command::PlotGamma(a)
            | Command::Reproduce(a) => a,
        }
    }
}

/// Loads the configuration and runs the command.
pub fn run(command: &Command, env_out: Option<PathBuf>) -> Result<(), CliError> {
    let args = command.common();
    let overrides = Overrides {
        out_dir: args.out_dir.clone(),
        seed: args.seed,
        steps: args.steps,
        paths: args.paths,
        no_plots: args.no_plots,
    };
    let cfg = RunConfig::load(&args.config)?.apply(&overrides, env_out)?;
    match command {
        Command::Validate(_) => commands::cmd_validate(&cfg),
        Command::SolveIh(_) => commands::cmd_solve_ih(&cfg),
        Command::SolveFh(_) => commands::cmd_solve_fh(&cfg),
        Command::Simulate(_) => commands::cmd_simulate(&cfg),
        Command::Mc(_) => commands::cmd_mc(&cfg),
        Command::Verify(_) => commands::cmd_verify(&cfg),
        Command::PlotGamma(_) => commands::cmd_plot_gamma(&cfg),
        Command::Reproduce(_) => commands::cmd_reproduce(&cfg),
    }
}
