mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "causal-voxel", version, about = "Causal counterfactuals on synthetic brain volumes")]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "CAUSAL_VOXEL_THREADS")]
    pub threads: Option<usize>,
    /// JSON file with settings; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw SCM samples to a CSV (one column per variable).
    Simulate(SimulateArgs),
    /// Fit the causal mechanisms on tabular data.
    TrainScm(TrainScmArgs),
    /// Held-out log-likelihood table for one or more trained models.
    EvalLoglik(EvalLoglikArgs),
    /// Sample a cohort from the SCM and render one volume per subject.
    SampleDataset(SampleDatasetArgs),
    /// Fit the style-to-volume regression on generated pairs.
    FitRegression(FitRegressionArgs),
    /// Recover style and noise latents of a volume.
    Invert(InvertArgs),
    /// Counterfactual volume under interventions.
    Counterfactual(CounterfactualArgs),
    /// Requested vs measured volume change over a cohort.
    EvalVolumes(EvalVolumesArgs),
    /// Cohort and distribution metrics.
    Metrics(MetricsArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Trained SCM file; the built-in reference mechanisms otherwise.
    #[arg(long)]
    pub scm: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainScmArgs {
    /// Graph JSON; the built-in Alzheimer's graph otherwise.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Training CSV with one column per variable.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// `affine` or `flow`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalLoglikArgs {
    /// Held-out CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `name=path` of a trained SCM; repeatable.
    #[arg(long = "model")]
    pub models: Vec<String>,
    /// Include the built-in reference mechanisms as `reference`.
    #[arg(long)]
    pub with_reference: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleDatasetArgs {
    #[arg(long)]
    pub scm: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitRegressionArgs {
    /// Number of generated (style, volume) pairs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct OptimizerArgs {
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub multi_start: Option<usize>,
    #[arg(long)]
    pub polish_iterations: Option<usize>,
    #[arg(long)]
    pub cg_iterations: Option<usize>,
    /// Tikhonov weight of the noise solve.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Latent JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the reconstruction G(w, n) here.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Write the recovered noise field here as a volume.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Intervention `name=value`; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE", allow_hyphen_values = true)]
    pub set: Vec<String>,
    /// Known demographics `name=value`; repeatable.
    #[arg(long = "demographic", value_name = "NAME=VALUE")]
    pub demographics: Vec<String>,
    #[arg(long)]
    pub scm: Option<PathBuf>,
    /// Regression JSON from `fit-regression`; fitted on the fly otherwise.
    #[arg(long)]
    pub reg: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON audit of intermediates; defaults to `<out>.audit.json`.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// `exact` or `paper_literal`.
    #[arg(long)]
    pub mode: Option<String>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct EvalVolumesArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Percent changes, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub settings: Option<Vec<f64>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reg: Option<PathBuf>,
    /// `known` (re-derive latents from the manifest seeds) or `invert`.
    #[arg(long)]
    pub latents: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Table CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Second cohort for distribution distances.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Use at most this many subjects per cohort.
    #[arg(long)]
    pub n: Option<usize>,
    /// Score vs ventricle CSV.
    #[arg(long)]
    pub scatter: Option<PathBuf>,
    /// Report JSON output (a CSV twin is written next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scm: Option<PathBuf>,
    #[arg(long)]
    pub reg: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    /// Images kept in the cache.
    #[arg(long)]
    pub cache: Option<usize>,
    /// Where to write the resolved config.
    #[arg(long)]
    pub echo: Option<PathBuf>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
