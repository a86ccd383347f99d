mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use cellrcov::kernels::RhoParams;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default seed shared by every command.
pub const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Debug)]
pub enum CliError {
    /// Files that cannot be read or written.
    Io(String),
    /// Bad flags, malformed data, or estimator failures.
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) | CliError::Input(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "cellrcov", version, about = "Cellwise and casewise robust covariance, outlier detection and CCA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
pub struct EstimatorArgs {
    /// Rank of the principal subspace (chosen by parallel analysis if omitted).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Ridge parameter in (0, 1] (cross-validated if omitted).
    #[arg(long)]
    pub delta: Option<f64>,
    /// MCD coverage for the score scatter.
    #[arg(long, default_value_t = 0.75)]
    pub alpha: f64,
    /// Tanh loss: end of the quadratic part.
    #[arg(long, default_value_t = RhoParams::DEFAULT_B)]
    pub rho_b: f64,
    /// Tanh loss: rejection point.
    #[arg(long, default_value_t = RhoParams::DEFAULT_C)]
    pub rho_c: f64,
    #[arg(long, default_value_t = RhoParams::DEFAULT_Q1)]
    pub rho_q1: f64,
    #[arg(long, default_value_t = RhoParams::DEFAULT_Q2)]
    pub rho_q2: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Token marking a missing cell (empty cells are missing too).
    #[arg(long, default_value = "NA")]
    pub na_token: String,
}

#[derive(Subcommand)]
enum Command {
    /// Robust covariance of a CSV data set.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        est: EstimatorArgs,
        /// Include the imputed data matrix.
        #[arg(long)]
        imputed: bool,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Mahalanobis-distance anomaly scores against a robust fit.
    Detect {
        /// Data used to fit the covariance.
        #[arg(long)]
        train: PathBuf,
        /// Cases to score (defaults to the training data).
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Column of the scoring file holding 0/1 anomaly labels.
        #[arg(long)]
        labels: Option<String>,
        /// Chi-square quantile level of the distance cutoff.
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Canonical correlation analysis of two blocks.
    Cca {
        #[arg(long)]
        x1: PathBuf,
        #[arg(long)]
        x2: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Number of canonical pairs.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Number of cross-validation folds for the mean canonical correlation.
        #[arg(long)]
        cv: Option<usize>,
        /// Covariance behind the analysis.
        #[arg(long, value_enum, default_value_t = commands::CcaKind::Cellrcov)]
        method: commands::CcaKind,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Monte Carlo comparison of covariance estimators.
    Simulate(commands::SimulateArgs),
    /// Parallel analysis for the subspace rank.
    Rank {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        est: EstimatorArgs,
        /// Largest rank examined.
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RCOV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("RCOV_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Estimate { input, output, est, imputed, format } => commands::estimate(&input, &output, &est, imputed, format),
        Command::Detect { train, score, output, labels, threshold, est, format } => {
            commands::detect(&train, score.as_deref(), &output, labels.as_deref(), threshold, &est, format)
        }
        Command::Cca { x1, x2, output, k, cv, method, est, format } => {
            commands::cca(&x1, &x2, &output, k, cv, method, &est, format)
        }
        Command::Simulate(args) => commands::simulate(&args),
        Command::Rank { input, output, est, k_max, format } => commands::rank(&input, &output, &est, k_max, format),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
