use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use laneseg_core::DecoderOrder;

#[derive(Debug, Parser)]
#[command(name = "laneseg", version, about = "Lane segmentation: train, evaluate, predict, fetch street-view imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and save it with its learning curves.
    Train(TrainArgs),
    /// Compute precision, recall, accuracy and F1 for a saved model.
    Eval(EvalArgs),
    /// Segment image files with a saved model.
    Predict(PredictArgs),
    /// Locate this machine, fetch its street-view image and segment it.
    Fetch(FetchArgs),
    /// Compare every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected two numbers separated by 'x', got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad number in {s:?}"))?;
    if a == 0 || b == 0 {
        return Err(format!("both sides must be positive, got {s:?}"));
    }
    Ok((a, b))
}

/// `HxW`, e.g. `32x64`.
pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    parse_pair(s)
}

/// `WxH` pixel size of a street-view image.
fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = parse_pair(s)?;
    let fit = |v: usize| u32::try_from(v).map_err(|_| format!("size too large: {s:?}"));
    Ok((fit(w)?, fit(h)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Paper,
    Conventional,
}

impl From<OrderArg> for DecoderOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Paper => DecoderOrder::Paper,
            OrderArg::Conventional => DecoderOrder::Conventional,
        }
    }
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct DataSource {
    /// Tab-separated manifest of image, mask and split (train/val/test).
    #[arg(long, group = "source")]
    pub manifest: Option<PathBuf>,
    /// Generate this many synthetic lane images instead of reading files.
    #[arg(long, group = "source", value_parser = clap::value_parser!(u32).range(1..))]
    pub synthetic: Option<u32>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: DataSource,
    /// Network input size.
    #[arg(long, value_parser = parse_dims, default_value = "32x64")]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for architecture.json, weights.lseg and curves.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Filters per encoder block, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub filters: Vec<usize>,
    #[arg(long, value_enum, default_value_t = OrderArg::Paper)]
    pub decoder_order: OrderArg,
    /// Divide the loss by the pixel-channel count as well as the batch size.
    #[arg(long)]
    pub normalize_per_pixel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding architecture.json and weights.lseg.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
    /// Manifest split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Input size; must equal the model's. Defaults to the model's.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    /// Directory for metrics.csv (defaults to the model directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory for the outputs (defaults to each input's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RGB images (PNG, JPEG or PPM).
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "mode", required = true, multiple = false)]
pub struct TransportMode {
    /// Replay recorded responses from this directory.
    #[arg(long, group = "mode")]
    pub fixtures: Option<PathBuf>,
    /// Query the live web services.
    #[arg(long, group = "mode")]
    pub live: bool,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub mode: TransportMode,
    /// API key; falls back to LANESEG_API_KEY.
    #[arg(long, env = "LANESEG_API_KEY", hide_env_values = true)]
    pub key: Option<String>,
    /// Directory for source, mask.png and overlay.png.
    #[arg(long)]
    pub out: PathBuf,
    /// Street-view image size, WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size, default_value = "640x320")]
    pub size: (u32, u32),
    #[arg(long, default_value_t = 0.0)]
    pub heading: f64,
    #[arg(long, default_value_t = 90.0)]
    pub fov: f64,
    /// Reuse previously downloaded images from this directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// With --live, save every response as a fixture in this directory.
    #[arg(long, requires = "live")]
    pub record: Option<PathBuf>,
}

#[cfg(debug_assertions)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerturbArg {
    Weights,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Corrupt the analytic gradients to exercise the failure path.
    #[cfg(debug_assertions)]
    #[arg(long, value_enum)]
    pub perturb: Option<PerturbArg>,
}
