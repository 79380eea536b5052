use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use momentflow_core::propagate::{CovMode, ValueCov};

/// Bayesian neural network predictives by deterministic moment propagation.
#[derive(Debug, Parser)]
#[command(name = "momentflow", version)]
struct Cli {
    /// Worker threads for batch stages (1 keeps runs sequential).
    #[arg(long, global = true, env = "MOMENTFLOW_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a MAP network.
    Train(TrainArgs),
    /// Fit a Laplace posterior around a trained network.
    Laplace(LaplaceArgs),
    /// Write predictive distributions for every row of a dataset.
    Predict(PredictArgs),
    /// Score predictions: metrics CSV plus per-datum JSONL.
    Eval(EvalArgs),
    /// Predictive-entropy densities for in-distribution and OOD data.
    Ood(OodArgs),
    /// Learn per-input noise levels that keep the prediction intact.
    Sensitivity(SensitivityArgs),
    /// Deviation from local linearity under input rescaling.
    Probe(ProbeArgs),
    /// Single-threaded prediction timings.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Analytic moment propagation.
    Ours,
    /// Monte Carlo over posterior samples.
    Mc,
    /// Point prediction at the MAP weights.
    Map,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Target column.
    #[arg(long, default_value = "target")]
    target: String,
    /// Column holding train/val/test tags, if present.
    #[arg(long, default_value = "split")]
    split_column: String,
    /// Standardise with training-split statistics.
    #[arg(long)]
    standardize: bool,
}

#[derive(Debug, Args)]
struct OutArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Layer widths, e.g. 4-50-1.
    #[arg(long)]
    arch: String,
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    task: TaskArg,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct LaplaceArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// diag, kfac or full.
    #[arg(long, default_value = "diag")]
    structure: String,
    /// all, lastN, or comma-separated layer indices.
    #[arg(long, default_value = "all")]
    layers: String,
    /// ggn or ef.
    #[arg(long, default_value = "ggn")]
    curvature: String,
    #[arg(long, default_value_t = 1e-2)]
    prior_min: f64,
    #[arg(long, default_value_t = 1e3)]
    prior_max: f64,
    #[arg(long, default_value_t = 21)]
    prior_points: usize,
    /// Regression noise variance; estimated from residuals when omitted.
    #[arg(long)]
    obs_noise: Option<f64>,
    /// Keep biases at their MAP values.
    #[arg(long)]
    no_bias: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct PredictOpts {
    #[arg(long)]
    model: PathBuf,
    /// Posterior file; the MAP network is used when omitted.
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Ours)]
    method: Method,
    #[arg(long, default_value = "diag")]
    cov_mode: CovMode,
    #[arg(long, default_value = "full")]
    value_cov: ValueCov,
    /// Monte Carlo samples.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Regression noise variance; estimated from training residuals when omitted.
    #[arg(long)]
    obs_noise: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    predict: PredictOpts,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    predict: PredictOpts,
    #[command(flatten)]
    data: DataArgs,
    /// Name written to the dataset column.
    #[arg(long)]
    name: Option<String>,
    /// Skip fitting the variance scale on the validation split.
    #[arg(long)]
    no_scale: bool,
    #[arg(long, default_value_t = 1e-3)]
    scale_min: f64,
    #[arg(long, default_value_t = 1e3)]
    scale_max: f64,
    #[arg(long, default_value_t = 41)]
    scale_points: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct OodArgs {
    #[command(flatten)]
    predict: PredictOpts,
    #[command(flatten)]
    data: DataArgs,
    /// Out-of-distribution CSV with the same columns.
    #[arg(long)]
    ood: PathBuf,
    /// Kernel variance.
    #[arg(long, default_value_t = 0.25)]
    bandwidth: f64,
    #[arg(long, default_value_t = 1000)]
    grid_points: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated row indices; defaults to the first --limit rows.
    #[arg(long)]
    indices: Option<String>,
    #[arg(long, default_value_t = 1)]
    limit: usize,
    /// Allowed NLPD increase before stopping (1e-2 for the tight preset).
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    #[arg(long, default_value = "full")]
    value_cov: ValueCov,
    /// Image width for the PGM output; inferred when omitted.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated eps values.
    #[arg(long, default_value = "1e-6,1e-5,1e-4,1e-3,1e-2,1e-1,1")]
    eps: String,
    /// Random subset size; every row when omitted.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated Monte Carlo sample counts.
    #[arg(long, default_value = "100,1000")]
    samples: String,
    #[arg(long, default_value = "diag")]
    cov_mode: CovMode,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    /// Inputs timed (first rows of the data).
    #[arg(long, default_value_t = 10)]
    limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
