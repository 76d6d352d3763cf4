use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use efv_core::config::EventFormat;
use efv_core::model::Mode;

#[derive(Debug, Parser)]
#[command(name = "efv", version, about = "Event-camera classification with fused frame and voxel streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a recording between the N-MNIST binary format and CSV.
    Convert(ConvertArgs),
    /// Turn a dataset directory into a sample cache.
    Preprocess(PreprocessArgs),
    /// Train a model on a sample cache.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a sample cache.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient of a small seeded model.
    Gradcheck(GradcheckArgs),
    /// Render a training log (and optionally an evaluation report) as CSV and SVG.
    Plot(PlotArgs),
    /// Write a seeded synthetic dataset directory.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Nmnist,
    Csv,
}

impl From<FormatArg> for EventFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Nmnist => EventFormat::Nmnist,
            FormatArg::Csv => EventFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Fused,
    ImageOnly,
    VoxelOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fused => Mode::Fused,
            ModeArg::ImageOnly => Mode::ImageOnly,
            ModeArg::VoxelOnly => Mode::VoxelOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Format of the input; the output uses the other one.
    #[arg(long, value_enum, default_value = "nmnist")]
    pub format: FormatArg,
    #[arg(long, default_value_t = 34)]
    pub width: u32,
    #[arg(long, default_value_t = 34)]
    pub height: u32,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Dataset directory: one numeric sub-directory per class, or plain recordings.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `[data]` format of the config.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training sample cache.
    #[arg(long)]
    pub input: PathBuf,
    /// Optional evaluation cache, scored after every epoch.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from an existing checkpoint and log instead of starting over.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the JSON report; it is always printed.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value = "fused")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Training log written by `train`.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Evaluation report written by `eval`, for the confusion matrix.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Ten digit glyphs moved along three saccades.
    Digits,
    /// Four classes split between stripe orientation and an event-density trend.
    Fusion,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "digits")]
    pub kind: SynthKind,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "nmnist")]
    pub format: FormatArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
