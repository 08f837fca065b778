//! Command-line harness: config parsing, subcommand dispatch, artifacts.

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::RunConfig;

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INDETERMINATE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Indeterminate(String),
    #[error("write failed: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numeric(_) | CliError::Io(_) => EXIT_NUMERIC,
            CliError::Indeterminate(_) => EXIT_INDETERMINATE,
        }
    }
}

impl From<sparse_chaos::Error> for CliError {
    fn from(e: sparse_chaos::Error) -> Self {
        use sparse_chaos::Error as E;
        let msg = e.to_string();
        match e {
            E::Indeterminate { .. } => CliError::Indeterminate(msg),
            E::EvaluatorFailure { .. } | E::NonFinite { .. } | E::ExcursionAreaInfinite | E::StreamMismatch(_) => {
                CliError::Numeric(msg)
            }
            E::Parameter { .. }
            | E::HittingConditionViolated { .. }
            | E::Precondition { .. }
            | E::InvalidFunctional(_)
            | E::Unsupported(_) => CliError::Validation(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sparse-chaos", version, about = "Sparse many-demes simulation and verification harness")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Model overrides shared by all subcommands.
#[derive(Debug, Default, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    #[arg(long = "a", global = true)]
    pub a: Option<f64>,
    #[arg(long, global = true)]
    pub mu_inf: Option<f64>,
    #[arg(long = "c", global = true)]
    pub c: Option<f64>,
    #[arg(long = "d", global = true)]
    pub d: Option<f64>,
    #[arg(long = "m", global = true)]
    pub m: Option<f64>,
    #[arg(long = "s", global = true)]
    pub s: Option<f64>,
    #[arg(long, global = true)]
    pub n_reps: Option<usize>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SystemArg {
    /// The D-deme system.
    Demes,
    /// Migration levels.
    Levels,
    /// Loop-free levels.
    Loopfree,
    /// The single-deme limit diffusion from the first initial value.
    Y,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Check the standing assumptions on a grid.
    Validate,
    /// Scale-function table, excursion area and extinction verdict.
    Quadrature,
    /// Simulate one path of a system.
    Simulate {
        #[arg(long, value_enum, default_value = "demes")]
        system: SystemArg,
        /// Number of demes (default: first entry of the ladder).
        #[arg(long = "demes")]
        demes: Option<usize>,
        /// Dump every recorded cell value as CSV.
        #[arg(long)]
        trajectory: bool,
    },
    /// Per-delta excursion summary, optionally the Poisson-limit report.
    Excursion {
        #[arg(long)]
        poisson: bool,
    },
    /// Sample one forest of excursions.
    Forest {
        /// Probe points of the total-mass curve.
        #[arg(long, default_value_t = 101)]
        probes: usize,
    },
    /// Finite-D Laplace estimates against the forest along the ladder.
    Converge {
        /// Also write an error-vs-D SVG.
        #[arg(long)]
        plot: bool,
    },
    /// Extinction verdict over a grid of alpha values.
    CriterionSweep {
        /// `start:end:count`.
        #[arg(long, default_value = "0.5:2.0:16")]
        alpha_grid: String,
    },
    /// Write the configuration reference page.
    Reference {
        #[arg(long, default_value = "docs/config-reference.md")]
        output: PathBuf,
    },
}

/// Resolved state handed to subcommands.
pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

fn resolve(cli: &Cli) -> Result<Context, CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let m = &cli.model;
    let mc = &mut config.model;
    macro_rules! set {
        ($($field:ident => $target:expr),*) => {
            $(if let Some(v) = m.$field.clone() { $target = v; })*
        };
    }
    set!(preset => mc.preset, alpha => mc.alpha, beta => mc.beta, kappa => mc.kappa, a => mc.a,
         mu_inf => mc.mu_inf, c => mc.c, d => mc.d, m => mc.m, s => mc.s,
         n_reps => config.numerics.n_reps, delta => config.numerics.delta);
    if let Some(dt) = m.dt {
        config.numerics.dt = Some(dt);
    }
    if let Some(seed) = cli.seed {
        config.run.master_seed = seed;
    }
    config.check()?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.run.output_dir.clone().map(PathBuf::from))
        .or_else(|| std::env::var_os(output::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sparse-chaos-out"));
    // The output location does not change results, so it stays out of the hash.
    let mut hashed = config.clone();
    hashed.run.output_dir = None;
    let payload = serde_json::to_vec(&(&hashed, &cli.command)).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(Context {
        config_hash: output::sha256_hex(&payload),
        config,
        out_dir,
    })
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<i32, CliError> {
    if let Command::Reference { output } = &cli.command {
        output::write_atomic(output, config::reference_page().as_bytes())?;
        println!("wrote {}", output.display());
        return Ok(EXIT_OK);
    }
    let ctx = resolve(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(format!("worker pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, &ctx))
}
