use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

pub const DATA_DIR_ENV: &str = "SDANET_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "sdanet", version, about = "Hyperspectral super-resolution experiments", args_override_self = true)]
pub struct Cli {
    /// Print reports as tab-separated rows with a header.
    #[arg(long, global = true)]
    pub tsv: bool,

    /// key=value file whose entries are applied as flags of the subcommand;
    /// flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic linear-mixing scene.
    Synth(SynthArgs),
    /// Bicubic-downsample a cube.
    Degrade(DegradeArgs),
    /// Train a model on every cube of a directory.
    Train(TrainArgs),
    /// Score a checkpoint on one LR/HR pair.
    Eval(EvalArgs),
    /// Train each structural variant under the same schedule.
    Ablate(TrainArgs),
    /// Train once per loss weight.
    Sweep(SweepArgs),
    /// Finite-difference check of each module and a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub endmembers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub out_lr: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Directory of `.hsi` HR cubes.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 6)]
    pub blocks: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = sdanet::objective::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Seeds the weights, the scene split and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u32,
    /// LR patch side.
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// LR patch stride; defaults to the patch side.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Fraction of scenes held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    /// Validation period in steps; 0 disables it.
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "bypass")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, required_unless_present = "bypass")]
    pub lr_cube: Option<PathBuf>,
    #[arg(long)]
    pub hr_cube: PathBuf,
    /// Score the HR cube against itself instead of a reconstruction.
    #[arg(long)]
    pub bypass: bool,
    /// ERGAS scale when no checkpoint supplies one.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Write the clamped reconstruction here.
    #[arg(long)]
    pub out_sr: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated loss weights; a later occurrence replaces earlier ones.
    #[arg(long, value_delimiter = ',', num_args = 1, action = ArgAction::Set, required = true)]
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Spatial side of the check inputs.
    #[arg(long, default_value_t = 4)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
