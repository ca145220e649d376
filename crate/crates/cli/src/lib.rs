//! Command-line front end for the two-stage design engine.
//!
//! `twostage rules` calibrates a decision rule and freezes it in `plan.json`;
//! `interim` and `simulate` read that plan back and refuse it if the
//! configuration has changed since.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod plan;

use clap::{Parser, Subcommand};
use config::Config;
use error::{CliError, CliResult};
use output::{Format, Output, Provenance};
use std::path::PathBuf;
use twostage_core::par;

#[derive(Debug, Parser)]
#[command(
    name = "twostage",
    version,
    about = "Plan, monitor and simulate two-stage adaptive cluster randomised trials"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Master seed; overrides `simulate.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the engine.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Power, expected and maximum sample size and cost of a design.
    Power {
        /// Evaluate a frozen plan instead of the configuration's design.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Calibrate the decision rule and write the plan and rule table.
    Rules,
    /// Search the stage 1 design space for the Pareto frontier.
    Pareto,
    /// Interim decision from stage 1 data or a given statistic.
    Interim {
        #[arg(long)]
        plan: PathBuf,
        /// Stage 1 cluster-period summaries (cluster, period, n, mean or sum, optional sd).
        #[arg(long, conflicts_with = "z1")]
        data: Option<PathBuf>,
        /// Stage 1 z statistic.
        #[arg(long, allow_hyphen_values = true)]
        z1: Option<f64>,
        /// Estimated icc to use with --z1.
        #[arg(long)]
        icc: Option<f64>,
        #[arg(long)]
        cac: Option<f64>,
        #[arg(long)]
        decay: Option<f64>,
        /// Never use an icc below the planning value.
        #[arg(long)]
        conservative: bool,
    },
    /// Monte Carlo operating characteristics of a plan.
    Simulate {
        /// Frozen plan; calibrated from the configuration when absent.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Write the per-replicate trace.
        #[arg(long)]
        trace: bool,
    },
    /// Print the JSON schema of the configuration file.
    Schema,
}

/// Run a parsed command line and return the text report.
pub fn execute(cli: &Cli) -> CliResult<String> {
    if let Command::Schema = cli.command {
        return Ok(config::schema() + "\n");
    }
    match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(1) => par::set_mode(par::Mode::Sequential),
        Some(n) => {
            par::init_threads(n);
        }
        None => {}
    }
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = Config::from_path(path)?;
    let seed = cli.seed.or(cfg.simulate.as_ref().map(|s| s.seed));
    let out = Output::new(&cli.out, cli.format, Provenance::new(cfg.hash(), seed))?;
    match &cli.command {
        Command::Power { plan } => commands::power(&cfg, &out, plan.as_deref()),
        Command::Rules => commands::rules(&cfg, &out),
        Command::Pareto => commands::pareto(&cfg, &out),
        Command::Interim { plan, data, z1, icc, cac, decay, conservative } => {
            let input = commands::InterimInput {
                data: data.as_deref(),
                z1: *z1,
                icc: *icc,
                cac: *cac,
                decay: *decay,
                conservative: *conservative,
            };
            commands::interim(&cfg, &out, plan, &input)
        }
        Command::Simulate { plan, replicates, trace } => {
            let input = commands::SimulateInput {
                plan: plan.as_deref(),
                replicates: *replicates,
                seed: cli.seed,
                trace: *trace,
            };
            commands::simulate(&cfg, &out, &input)
        }
        Command::Schema => unreachable!(),
    }
}

/// Parse `args`, run, print, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("twostage: {e}");
            e.exit_code()
        }
    }
}
