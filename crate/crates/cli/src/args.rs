//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "ssa-unet",
    version,
    about = "SSA-UNet nowcasting engine: synthesis, training, evaluation, explanation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic radar-frame archive (RSEQ v1)
    Synth(SynthArgs),
    /// Train a model on an archive, writing checkpoints and a loss CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint and the persistence baseline
    Eval(EvalArgs),
    /// Audit parameter counts per module and across the published configs
    Params(ParamsArgs),
    /// Render Grad-CAM heatmaps for one layer or the full layer sweep
    Explain(ExplainArgs),
    /// Train one tiny model per Shuffle Attention group configuration
    SweepSa(SweepSaArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Precip,
    Cloud,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Shuffle,
    Cbam,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    None,
    Nl20,
    Nl50,
}

impl FilterArg {
    pub fn theta(self) -> f64 {
        match self {
            FilterArg::None => 0.0,
            FilterArg::Nl20 => 0.2,
            FilterArg::Nl50 => 0.5,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterScopeArg {
    /// every target frame must satisfy the rain fraction
    All,
    /// at least one target frame must satisfy it
    Any,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    Full,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "precip")]
    pub task: TaskArg,
    /// Number of frames to generate
    #[arg(long)]
    pub frames: usize,
    /// Square frame side in pixels (>= 32)
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output archive path
    #[arg(long)]
    pub out: PathBuf,
    /// Blob count (precipitation task)
    #[arg(long, default_value_t = 4)]
    pub blobs: usize,
    /// Blob sigma range in pixels, "lo,hi"
    #[arg(long, default_value = "3,7", value_parser = parse_f64_pair)]
    pub sigma: (f64, f64),
    /// Advection speed range in pixels per frame, "lo,hi"
    #[arg(long, default_value = "0.3,0.8", value_parser = parse_f64_pair)]
    pub speed: (f64, f64),
    /// Per-frame intensity growth/decay bound
    #[arg(long, default_value_t = 0.004)]
    pub growth: f64,
    /// Peak intensity cap
    #[arg(long, default_value_t = 1.0)]
    pub max_intensity: f64,
    /// Cloud-mask threshold (cloud task)
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Input RSEQ archive
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "precip")]
    pub task: TaskArg,
    /// Output frame count (precipitation: 1, 6 or 12)
    #[arg(long, default_value_t = 12, value_parser = clap::builder::PossibleValuesParser::new(["1", "6", "12"]).map(|s| s.parse::<usize>().unwrap()))]
    pub outputs: usize,
    /// Encoder kernels per layer (3 standard, 2 reduced)
    #[arg(long, default_value_t = 3, value_parser = clap::builder::PossibleValuesParser::new(["2", "3"]).map(|s| s.parse::<usize>().unwrap()))]
    pub kernels: usize,
    #[arg(long, value_enum, default_value = "shuffle")]
    pub attention: AttentionArg,
    /// Shuffle Attention group sizes per encoder level, "g1,g2,g3,g4,g5"
    #[arg(long, value_parser = parse_usize_list)]
    pub sa_groups: Option<Vec<usize>>,
    /// Grouped-pointwise sizes for encoder levels 2..5, "g2,g3,g4,g5"
    #[arg(long, value_parser = parse_usize_list)]
    pub shuffle_groups: Option<Vec<usize>>,
    /// Use classic double-conv blocks everywhere (the CBAM baseline layout)
    #[arg(long, default_value_t = false)]
    pub classic_convs: bool,
    /// Nominal channel widths, "w1,w2,w3,w4,w5"
    #[arg(long, value_parser = parse_usize_list)]
    pub widths: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "nl50")]
    pub filter: FilterArg,
    #[arg(long, value_enum, default_value = "all")]
    pub filter_scope: FilterScopeArg,
    /// Normalized value above which a pixel counts as rainy
    #[arg(long, default_value_t = 0.0)]
    pub rain_cutoff: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Training window stride
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Validation window stride
    #[arg(long, default_value_t = 6)]
    pub val_stride: usize,
    /// Chronological split fractions, "train,val"
    #[arg(long, default_value = "0.7,0.15", value_parser = parse_f64_pair)]
    pub splits: (f64, f64),
    /// Output directory for checkpoints, loss CSV and manifest
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate (omit with --baseline-only)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate only the persistence baseline
    #[arg(long, default_value_t = false)]
    pub baseline_only: bool,
    #[arg(long, value_enum, default_value = "precip")]
    pub task: TaskArg,
    /// Output count for --baseline-only (taken from the checkpoint otherwise)
    #[arg(long, default_value_t = 12, value_parser = clap::builder::PossibleValuesParser::new(["1", "6", "12"]).map(|s| s.parse::<usize>().unwrap()))]
    pub outputs: usize,
    /// Binarization threshold on denormalized values
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value = "none")]
    pub filter: FilterArg,
    #[arg(long, value_enum, default_value = "all")]
    pub filter_scope: FilterScopeArg,
    #[arg(long, default_value_t = 0.0)]
    pub rain_cutoff: f64,
    /// Which chronological split to evaluate
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value = "0.7,0.15", value_parser = parse_f64_pair)]
    pub splits: (f64, f64),
    /// Evaluation window stride
    #[arg(long, default_value_t = 6)]
    pub stride: usize,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
    /// Fail (exit 3) if any record is degenerate
    #[arg(long, default_value_t = false)]
    pub strict: bool,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ParamsArgs {
    /// Print the three published configurations with reduction percentages
    #[arg(long, default_value_t = false)]
    pub compare: bool,
    #[arg(long, default_value_t = 3, value_parser = clap::builder::PossibleValuesParser::new(["2", "3"]).map(|s| s.parse::<usize>().unwrap()))]
    pub kernels: usize,
    #[arg(long, value_enum, default_value = "shuffle")]
    pub attention: AttentionArg,
    #[arg(long, default_value_t = false)]
    pub classic_convs: bool,
    #[arg(long = "in", default_value_t = 12)]
    pub in_channels: usize,
    #[arg(long = "out", default_value_t = 12)]
    pub out_channels: usize,
    #[arg(long, value_parser = parse_usize_list)]
    pub widths: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_usize_list)]
    pub sa_groups: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_usize_list)]
    pub shuffle_groups: Option<Vec<usize>>,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "precip")]
    pub task: TaskArg,
    /// Layer name from the registry namespace (e.g. encoder.level3.conv1)
    #[arg(long, conflicts_with = "sweep")]
    pub layer: Option<String>,
    /// Render all 24 default layers
    #[arg(long, default_value_t = false)]
    pub sweep: bool,
    /// Which window of the selected split to explain
    #[arg(long, default_value_t = 0)]
    pub window_index: usize,
    /// Which output frame's sum to differentiate
    #[arg(long)]
    pub frame_index: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value = "0.7,0.15", value_parser = parse_f64_pair)]
    pub splits: (f64, f64),
    #[arg(long, default_value_t = 6)]
    pub stride: usize,
    /// Also write a side-by-side composite (input, prediction, target, heatmap)
    #[arg(long, default_value_t = false)]
    pub composite: bool,
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Args)]
pub struct SweepSaArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Semicolon-separated G configurations, e.g. "2,4,8,16,32;4,4,8,8,16"
    #[arg(long)]
    pub configs: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nominal channel widths of the swept models
    #[arg(long, default_value = "8,16,32,64,128", value_parser = parse_usize_list)]
    pub widths: Vec<usize>,
    #[arg(long, value_parser = parse_usize_list)]
    pub shuffle_groups: Option<Vec<usize>>,
    #[arg(long, default_value_t = 6, value_parser = clap::builder::PossibleValuesParser::new(["1", "6", "12"]).map(|s| s.parse::<usize>().unwrap()))]
    pub outputs: usize,
    #[arg(long, default_value = "0.7,0.15", value_parser = parse_f64_pair)]
    pub splits: (f64, f64),
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("\"{p}\": {e}")))
        .collect()
}

fn parse_f64_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"lo,hi\", got \"{s}\""));
    }
    let lo = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let hi = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}
