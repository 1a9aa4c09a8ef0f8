//! `legrad`: explanation, evaluation and service front end.
//!
//! Exit codes: 0 success, 2 bad arguments or unresolvable query, 3 model
//! load failure, 4 inference failure, 5 bind failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use legrad_core::eval::{ClassSource, PerturbMode};
use legrad_core::explain::{LayerSpec, Method};
use legrad_core::model::Pooling;
use legrad_server::Precision;

#[derive(Debug, Parser)]
#[command(
    name = "legrad",
    version,
    about = "Attention-gradient explanations for Vision Transformers"
)]
pub struct Cli {
    /// Worker threads for evaluation and numeric kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one image and write overlay PNG, heatmap PNG and JSON.
    Explain(ExplainArgs),
    /// Segmentation benchmark: pixel accuracy, mIoU and mAP.
    EvalSeg(EvalSegArgs),
    /// Point-localization benchmark: p-mIoU.
    EvalPoints(EvalPointsArgs),
    /// Perturbation benchmark: accuracy curve and AUC.
    EvalPerturb(EvalPerturbArgs),
    /// Serve the HTTP API over every model in a directory.
    Serve(ServeArgs),
    /// Write a seeded tiny model container.
    MakeTiny(MakeTinyArgs),
    /// Check attention gradients against central differences on 20 tiny models.
    FdBattery(FdBatteryArgs),
    /// Compare the engine forward against a parity container's references.
    Parity(ParityArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model container path, or a name resolved inside LEGRAD_MODEL_DIR.
    #[arg(long)]
    pub model: String,
    /// Directory searched for --model names.
    #[arg(long, env = "LEGRAD_MODEL_DIR", hide_env_values = true)]
    pub model_dir: Option<PathBuf>,
    /// Scalar type for inference.
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    pub precision: Precision,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: legrad_core::Error| e.to_string())
}

fn parse_layers(s: &str) -> Result<LayerSpec, String> {
    s.parse().map_err(|e: legrad_core::Error| e.to_string())
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// legrad, raw_attention, rollout, gradcam or attentioncam.
    #[arg(long, default_value = "legrad", value_parser = parse_method)]
    pub method: Method,
    /// Layers merged by legrad: lastP%, all, or 1-based indices like 12, 9-12, 3,5.
    #[arg(long, default_value = "last40%", value_parser = parse_layers)]
    pub layers: LayerSpec,
    /// Layer used by gradcam (default ceil(2L/3)).
    #[arg(long)]
    pub gradcam_layer: Option<usize>,
    /// Subtract the map of the "empty" embedding where it dominates.
    #[arg(long)]
    pub suppress_background: bool,
    /// Normalized background level above which a pixel is zeroed.
    #[arg(long, default_value_t = 0.8, value_parser = parse_unit)]
    pub suppress_threshold: f64,
    /// Classifier name (default: the model's first classifier).
    #[arg(long)]
    pub classifier: Option<String>,
}

#[derive(Debug, Args)]
#[group(id = "query_source", required = true, multiple = false)]
pub struct QueryArgs {
    /// Class label of the classifier.
    #[arg(long, group = "query_source")]
    pub query: Option<String>,
    /// Class column index of the classifier.
    #[arg(long, group = "query_source")]
    pub class_index: Option<usize>,
    /// Name of an embedding stored in the model container.
    #[arg(long, group = "query_source")]
    pub embedding: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image (PNG or JPEG).
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Binarization threshold recorded in the JSON output.
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub threshold: f64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Output file stem (default: the image file stem).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON-lines manifest; paths inside resolve against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Evaluate at most N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Directory for report.json and report.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Heatmap binarization threshold (strict >).
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvalPointsArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Heatmap binarization threshold (strict >).
    #[arg(long, default_value_t = 0.5, value_parser = parse_unit)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Positive,
    Negative,
}

impl From<ModeArg> for PerturbMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Positive => PerturbMode::Positive,
            ModeArg::Negative => PerturbMode::Negative,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassSourceArg {
    Predicted,
    Target,
}

impl From<ClassSourceArg> for ClassSource {
    fn from(c: ClassSourceArg) -> Self {
        match c {
            ClassSourceArg::Predicted => ClassSource::Predicted,
            ClassSourceArg::Target => ClassSource::Target,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalPerturbArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Erase most relevant pixels first (positive) or least relevant first (negative).
    #[arg(long, value_enum, default_value = "positive")]
    pub mode: ModeArg,
    /// Track the predicted class or the manifest's target class.
    #[arg(long, value_enum, default_value = "predicted")]
    pub class_source: ClassSourceArg,
    /// Trapezoid-rule AUC instead of the mean of the ten accuracies.
    #[arg(long)]
    pub trapezoid: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of model containers to load at startup.
    #[arg(long, env = "LEGRAD_MODEL_DIR", hide_env_values = true)]
    pub model_dir: Option<PathBuf>,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// TCP port to bind.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Origin allowed by CORS (default: any).
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Scalar type for inference.
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    Cls,
    Pooler,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Cls => Pooling::ClsToken,
            PoolingArg::Pooler => Pooling::AttnPooler,
        }
    }
}

#[derive(Debug, Args)]
pub struct MakeTinyArgs {
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the per-tensor weight streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transformer blocks.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Attention heads per block.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Token width d.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Number of patches; must be a perfect square.
    #[arg(long, default_value_t = 16)]
    pub patches: usize,
    /// Class-token readout or learned-query attention pooler.
    #[arg(long, value_enum, default_value = "cls")]
    pub pooling: PoolingArg,
    /// Stored tensor dtype.
    #[arg(long, default_value = "f32", value_parser = parse_precision)]
    pub dtype: Precision,
}

#[derive(Debug, Args)]
pub struct FdBatteryArgs {
    /// Maximum relative error allowed.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ParityArgs {
    /// Parity container.
    pub container: PathBuf,
    /// Scalar type for inference.
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    pub precision: Precision,
    /// Maximum absolute deviation allowed.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("LEGRAD_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
