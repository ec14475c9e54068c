//! Command-line experiment runner for `matsde`.
//!
//! Exit codes: 0 pass, 1 check failed, 2 usage or config error, 3 runtime
//! error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod config;
pub mod fx;
pub mod report;
pub mod simulate;
pub mod verify;

pub use config::{ExperimentConfig, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<matsde::Error> for CliError {
    fn from(e: matsde::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "matsde", version, about = "Matrix stochastic calculus experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Number of grid steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Matrix dimension n.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Time horizon T.
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (falls back to MATSDE_OUTPUT_DIR).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Append to report files instead of replacing them.
    #[arg(long, global = true)]
    pub append: bool,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            paths: self.paths,
            steps: self.steps,
            dim: self.dim,
            horizon: self.horizon,
            out: self.out.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one verification experiment.
    Verify {
        identity: Identity,
    },
    /// Solve the configured SDE and write the ensemble.
    Simulate,
    /// Currency rate matrices.
    #[command(subcommand)]
    Fx(fx::FxCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Identity {
    Covariance,
    Isometry,
    QvMartingale,
    ItoFormula,
    Taylor,
    MomentBound,
    MonotoneBound,
    PicardContraction,
    TruncationConsistency,
    StrongOrder,
    Conditions,
}

impl Identity {
    pub fn name(self) -> String {
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(t) = threads else {
        return Ok(());
    };
    if t == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<Status, CliError> {
    configure_threads(cli.common.threads)?;
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides())?;
    let sink = report::Sink::new(cfg.output_dir(), cli.common.append);
    match &cli.command {
        Command::Verify { identity } => verify::run(*identity, &cfg, &sink),
        Command::Simulate => simulate::run(&cfg, &sink),
        Command::Fx(cmd) => fx::run(cmd, &cfg, &sink),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(status) => status.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
