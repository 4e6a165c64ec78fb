mod commands;
mod exit;
mod manifest;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "shiftgrid", version, about = "Predict post-disruption movement grids")]
struct Cli {
    /// Single-threaded execution (bit-reproducible outputs).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic population with known latent reliance.
    SynthGen(SynthGenArgs),
    /// Build per-individual sample archives from raw CSV tables.
    Prepare(PrepareArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a sample split.
    Eval(EvalArgs),
    /// Train and evaluate all five variants.
    Ablate(AblateArgs),
    /// Re-run ingest, training and evaluation per crop size.
    Sensitivity(SensitivityArgs),
    /// Similar-pre / different-reliance pair study.
    Pairs(PairsArgs),
    /// Write pre, post, predicted and thresholded maps of one individual.
    ExportMap(ExportMapArgs),
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    /// SynthConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Crop size recorded in the emitted ingest_config.json.
    #[arg(long, default_value_t = 32)]
    pub g: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Directory with trajectories.csv, pois.csv and optionally splits.json.
    #[arg(long)]
    pub raw: PathBuf,
    /// IngestConfig JSON; defaults to <raw>/ingest_config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the crop size.
    #[arg(long)]
    pub g: Option<usize>,
    /// Seed for the split shuffle when the raw data has no splits.json.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model and optimization settings shared by training subcommands.
#[derive(Args, Debug, Clone)]
pub struct TrainOptions {
    /// Model settings JSON (base_channels, mlp_hidden, mlp_layers,
    /// attention_token_budget).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// TrainConfig JSON.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub w_max: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory produced by `prepare`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Use the true post grids as predictions (pipeline check).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated crop sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PairsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.3)]
    pub pre_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sir_max: f64,
    /// Keep only the first N pairs in ranking order.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportMapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub uid: u64,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads(cli.deterministic) {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit::CONFIG);
    }
    let result = match cli.command {
        Command::SynthGen(a) => commands::synth_gen(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Sensitivity(a) => commands::sensitivity(&a),
        Command::Pairs(a) => commands::pairs(&a),
        Command::ExportMap(a) => commands::export_map(&a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e))
        }
    }
}

/// `--deterministic` forces one worker; otherwise `SHIFTGRID_THREADS` caps
/// the pool.
fn configure_threads(deterministic: bool) -> anyhow::Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var("SHIFTGRID_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| anyhow::anyhow!("SHIFTGRID_THREADS must be a positive integer, got `{v}`"))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}
