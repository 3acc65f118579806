use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use geolandmark::heatmap::{DEFAULT_SIGMA, DEFAULT_TEMPERATURE};
use geolandmark::losses::DEFAULT_LAMBDA;
use geolandmark::optim::{DEFAULT_BASE_LR, DEFAULT_GAMMA, DEFAULT_WARMUP_START, DEFAULT_WARMUP_STEPS, DEFAULT_WEIGHT_DECAY};

#[derive(Debug, Parser)]
#[command(name = "geolandmark", version, about = "Dental landmark heatmaps with a geometric line prior")]
pub struct Cli {
    /// Worker threads; 1 gives the single-threaded reference behaviour.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic annotation files.
    Synth(SynthArgs),
    /// Encode annotations as Gaussian target heatmaps.
    Encode(EncodeArgs),
    /// Decode heatmaps into landmark coordinates.
    Decode(DecodeArgs),
    /// Compare predictions with ground truth.
    Eval(EvalArgs),
    /// Fit heatmaps to annotations with the combined loss.
    Train(TrainArgs),
    /// Verify analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Merge training reports from several runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total number of images.
    #[arg(long, default_value_t = 347)]
    pub n: usize,
    /// Train, validation and test counts.
    #[arg(long, default_value = "36,149,162")]
    pub split: String,
    /// Standard deviation of annotation noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 957)]
    pub width: u32,
    #[arg(long, default_value_t = 555)]
    pub height: u32,
    #[arg(long, default_value_t = 0.1)]
    pub spacing: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Annotation file; every record contributes 16 channels.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Heatmap width; defaults to each record's image width.
    #[arg(long)]
    pub width: Option<usize>,
    /// Heatmap height; defaults to each record's image height.
    #[arg(long)]
    pub height: Option<usize>,
    /// Gaussian standard deviation in heatmap pixels.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Output heatmap container.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum DecodeMode {
    Argmax,
    Softargmax,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Heatmap container with a multiple of 16 channels.
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[arg(long, value_enum, default_value_t = DecodeMode::Softargmax)]
    pub mode: DecodeMode,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Annotation file supplying image ids, sizes and spacing; decoded
    /// points are mapped back to its image grid.
    #[arg(long)]
    pub like: Option<PathBuf>,
    /// Output prediction file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// SDR thresholds in millimetres.
    #[arg(long, default_value = "0.5,1,2")]
    pub thresholds: String,
    /// Use each ground-truth record's spacing (the default).
    #[arg(long, conflicts_with = "spacing")]
    pub spacing_from_gt: bool,
    /// Use one spacing in mm per pixel for every image.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Output metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    FreeLogits,
    LoraLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LossModeArg {
    PaperLiteral,
    Absolute,
    Squared,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with any of the options below (snake_case keys); flags
    /// given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Reference positions for the validation images.
    #[arg(long)]
    pub val_reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::FreeLogits)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value_t = LossModeArg::PaperLiteral)]
    pub loss_mode: LossModeArg,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Images per step; 0 uses every fitted image.
    #[arg(long, default_value_t = 0)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target Gaussian width in heatmap pixels.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub heatmap_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub crop_margin: f64,
    #[arg(long, default_value_t = DEFAULT_BASE_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_WARMUP_STEPS)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP_START)]
    pub warmup_start_factor: f64,
    /// Epochs at which the learning rate is multiplied by gamma.
    #[arg(long, default_value = "170,200")]
    pub milestones: String,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_DECAY)]
    pub weight_decay: f64,
    /// Epoch at which the geometric term switches on.
    #[arg(long, default_value_t = 0)]
    pub lambda_start_epoch: usize,
    /// Epochs over which the geometric weight rises to --lambda.
    #[arg(long, default_value_t = 0)]
    pub lambda_ramp_epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = 4.0)]
    pub lora_alpha: f64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value_t = LossModeArg::PaperLiteral)]
    pub loss_mode: LossModeArg,
    /// Check the degenerate-fit fallback instead of the geometric gradient.
    #[arg(long)]
    pub inject_degenerate: bool,
    /// Output report CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training output directories, each holding train_report.csv.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Output merged CSV.
    #[arg(long)]
    pub out: PathBuf,
}
