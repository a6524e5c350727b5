//! `udfwave`: command-line front end for the UDF wavelet pipeline.

mod commands;
mod manifest;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<udfwave::Error> for CliError {
    fn from(e: udfwave::Error) -> Self {
        use udfwave::Error::*;
        let code = match &e {
            InvalidParameter(_) => EXIT_USAGE,
            Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "udfwave",
    version,
    about = "Wavelet-compressed unsigned distance fields: sampling, filter learning, diffusion generation, meshing and evaluation"
)]
struct Cli {
    /// Settings file of `key = value` lines; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample truncated UDF volumes from OBJ/PLY meshes.
    SampleUdf(SampleUdfArgs),
    /// Learn a four-filter wavelet bank on a set of volumes.
    OptimizeFilter(OptimizeFilterArgs),
    /// Compress volumes into coarse + detail coefficient pyramids.
    Decompose(DecomposeArgs),
    /// Invert pyramids back into volumes.
    Reconstruct(ReconstructArgs),
    /// Train the coarse-volume denoiser and the detail predictor.
    Train(TrainArgs),
    /// Generate volumes from a trained model.
    Generate(GenerateArgs),
    /// Extract triangle meshes from volumes.
    Extract(ExtractArgs),
    /// Score generated shapes against references (MMD, COV, 1-NNA).
    EvalGen(EvalGenArgs),
}

#[derive(Args, Debug)]
pub struct SampleUdfArgs {
    /// Mesh files or directories containing them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub truncation: Option<f64>,
    /// Empty border kept when fitting meshes to the unit cube.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Fit each mesh to the unit cube first (default true).
    #[arg(long)]
    pub normalize: Option<bool>,
}

#[derive(Args, Debug)]
pub struct OptimizeFilterArgs {
    /// Volume files or directories.
    #[arg(required = true)]
    pub volumes: Vec<PathBuf>,
    /// Preset name or bank file to start from.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Loss trace CSV; defaults next to the bank.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub far_weight: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub holdout: Option<f64>,
    /// both, analysis or synthesis.
    #[arg(long)]
    pub trainable: Option<String>,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[arg(required = true)]
    pub volumes: Vec<PathBuf>,
    /// Preset name or bank file.
    #[arg(long)]
    pub bank: String,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(required = true)]
    pub pyramids: Vec<PathBuf>,
    #[arg(long)]
    pub bank: String,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Directory of source volumes; prints near-surface RMSE per file.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(required = true)]
    pub volumes: Vec<PathBuf>,
    #[arg(long)]
    pub bank: String,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Per-volume labels: `name,class` or `name,v1,...,vk` lines.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Condition length used for class labels.
    #[arg(long)]
    pub cond_len: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// zero, linear or mlp.
    #[arg(long)]
    pub fine: Option<String>,
    /// Mini-batch steps for the mlp fine predictor.
    #[arg(long)]
    pub fine_iters: Option<usize>,
    #[arg(long)]
    pub fine_hidden: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: String,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Class index or comma-separated embedding.
    #[arg(long)]
    pub condition: Option<String>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(required = true)]
    pub volumes: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Offset level in distance units (default 1.5 voxels, at most half the truncation).
    #[arg(long)]
    pub iso: Option<f64>,
    #[arg(long)]
    pub project_steps: Option<usize>,
    #[arg(long)]
    pub damping: Option<f64>,
    /// Weld tolerance in distance units (default 0.25 voxels).
    #[arg(long)]
    pub weld_tol: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalGenArgs {
    /// Directory (or files) of generated .obj/.ply/.xyz shapes.
    #[arg(long, required = true, num_args = 1..)]
    pub generated: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub reference: Vec<PathBuf>,
    /// Points sampled per mesh.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("UDFWAVE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        CliError::usage(format!(
            "UDFWAVE_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    if n == 0 {
        return Err(CliError::usage("UDFWAVE_THREADS must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut settings = settings::Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::SampleUdf(a) => commands::sample_udf(a, &mut settings),
        Command::OptimizeFilter(a) => commands::optimize_filter(a, &mut settings),
        Command::Decompose(a) => commands::decompose(a, &mut settings),
        Command::Reconstruct(a) => commands::reconstruct(a, &mut settings),
        Command::Train(a) => commands::train(a, &mut settings),
        Command::Generate(a) => commands::generate(a, &mut settings),
        Command::Extract(a) => commands::extract(a, &mut settings),
        Command::EvalGen(a) => commands::eval_gen(a, &mut settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
