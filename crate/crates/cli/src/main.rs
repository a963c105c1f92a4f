mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vgc_core::network::BlockKind;
use vgc_core::Error;

/// Exit status for each failure class.
pub mod exit {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const FORMAT: u8 = 4;
    pub const CONFIG_MISMATCH: u8 = 5;
    pub const OTHER: u8 = 1;
}

/// Variable-rate learned image codec.
#[derive(Debug, Parser)]
#[command(name = "vgc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a directory of PNG/PPM images.
    Train(TrainArgs),
    /// Compress an image into a bitstream.
    Encode(EncodeArgs),
    /// Reconstruct an image from a bitstream.
    Decode(DecodeArgs),
    /// Encode and decode images at one operating point and report quality.
    Eval(EvalArgs),
    /// Evaluate images at several (B, qp) operating points and write a CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Model checkpoint. A directory means `<dir>/model.ckpt`.
    #[arg(long, env = "VGC_CHECKPOINT_DIR")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML file with optional `[codec]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Where to write checkpoints (after every epoch). Defaults to --checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log CSV. Appended to when resuming.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Bit depths trained jointly, e.g. `2,4,8`.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<u8>>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub code_channels: Option<usize>,
    #[arg(long, value_parser = parse_block_kind)]
    pub block_kind: Option<BlockKind>,
}

#[derive(Debug, Args)]
pub struct LayerArgs {
    /// Code-map bit depth.
    #[arg(long, short = 'b', value_parser = clap::value_parser!(u8).range(1..=8))]
    pub bits: u8,
    /// Enhancement-layer quality parameter (1 = finest, 51 = coarsest).
    #[arg(long, default_value_t = commands::DEFAULT_QP, value_parser = clap::value_parser!(u8).range(1..=51))]
    pub qp: u8,
    /// Write the base layer only.
    #[arg(long)]
    pub no_enhancement: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write the base-layer reconstruction here.
    #[arg(long)]
    pub base_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[command(flatten)]
    pub layer: LayerArgs,
    /// CSV output; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Operating points as `B:qp`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = commands::parse_point, default_value = "3:50,4:40,5:35,6:30,7:25")]
    pub points: Vec<(u8, u8)>,
    /// Sweep the base layer only (qp is ignored).
    #[arg(long)]
    pub no_enhancement: bool,
    /// CSV output; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn parse_block_kind(s: &str) -> Result<BlockKind, String> {
    match s {
        "resgdn" => Ok(BlockKind::ResGdn),
        "resrelu" => Ok(BlockKind::ResRelu),
        "nores" => Ok(BlockKind::NoRes),
        _ => Err(format!("unknown block kind {s:?} (resgdn, resrelu, nores)")),
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::UnsupportedImage(_) | Error::Dataset(_) => exit::IO,
        Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::Checksum { .. }
        | Error::Truncated { .. }
        | Error::Corrupt { .. } => exit::FORMAT,
        Error::ConfigMismatch { .. } => exit::CONFIG_MISMATCH,
        Error::InvalidArgument(_) | Error::Config(_) | Error::TooSmallForMsSsim { .. } => exit::USAGE,
        _ => exit::OTHER,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
