use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[command(name = "unravel", version, about = "Residual networks as ensembles of paths: training, lesion and gradient-flow experiments")]
pub struct Cli {
    /// Training config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed. Required by every subcommand except `paths` and `replay`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent trials and samples.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train a network and write a checkpoint and history CSV.
    Train(TrainArgs),
    /// Delete blocks from a trained network and measure test error.
    Lesion(LesionArgs),
    /// Swap random pairs of blocks and measure test error.
    Reorder(ReorderArgs),
    /// Sample per-path gradient norms by path length.
    Gradflow(GradflowArgs),
    /// Path-length tables for n blocks (pure computation).
    Paths(PathsArgs),
    /// Rerun the invocation recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Lesion(_) => "lesion",
            Command::Reorder(_) => "reorder",
            Command::Gradflow(_) => "gradflow",
            Command::Paths(_) => "paths",
            Command::Replay(_) => "replay",
        }
    }
}

/// Where examples come from: a CSV file, or the spiral task split generated
/// from `--data-seed` (default: the run seed).
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Residual,
    Feedforward,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// One stage of identical-width blocks.
    Uniform,
    /// Widths 16/32/64 joined by projection transitions.
    ThreeStage,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "residual")]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value = "uniform")]
    pub arch: ArchKind,
    /// Residual blocks (split evenly across stages for three-stage).
    #[arg(long, default_value_t = unravel_core::desk::BLOCKS)]
    pub blocks: usize,
    /// Layers of the feedforward model.
    #[arg(long, default_value_t = unravel_core::desk::FEEDFORWARD_LAYERS)]
    pub layers: usize,
    #[arg(long, default_value_t = unravel_core::desk::WIDTH)]
    pub width: usize,
    /// Training examples (CSV); requires --test-data.
    #[arg(long, requires = "test_data")]
    pub train_data: Option<PathBuf>,
    #[arg(long, requires = "train_data")]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionMode {
    Single,
    Multi,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: LesionMode,
    /// Deletion counts for multi mode.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReorderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub swaps: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    /// Allow nets with several stages by keeping swaps inside a stage.
    #[arg(long)]
    pub stage_local: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradflowArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Path lengths: a list `0,4,8` or an inclusive range `0..24:2`.
    /// Default: every other length from 0 to n.
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = unravel_core::desk::BATCH_SIZE)]
    pub batch_size: usize,
    /// Use running batch-norm statistics instead of batch statistics.
    #[arg(long)]
    pub eval_mode: bool,
    /// Coverage of the reported effective band.
    #[arg(long, default_value_t = unravel_core::desk::BAND_COVERAGE)]
    pub coverage: f64,
    /// Exit with status 2 unless log norm falls with length (correlation < -0.9).
    #[arg(long)]
    pub assert_decay: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsArgs {
    #[arg(long)]
    pub n: usize,
    /// Deleted blocks for the remaining-fraction table.
    #[arg(long)]
    pub deleted: Option<usize>,
    /// Inclusive length band `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub band: Option<Vec<usize>>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}
