//! The `lucid` command line: every workflow of the enhancement toolkit
//! behind one entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lucid_core::data::Split;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "lucid",
    version,
    about = "Degradation-aware real-time video enhancement",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// TOML configuration file; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory for outputs, logs, checkpoints and the config snapshot.
    #[arg(long, global = true, default_value = "lucid-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a degraded corpus: paired patches plus degraded clips.
    Degrade {
        /// Corpus root (images/*.png and clips/<name>/ directories).
        #[arg(long)]
        corpus: PathBuf,
        /// Which split to draw source material from.
        #[arg(long, default_value = "train")]
        split: String,
        /// Number of paired samples.
        #[arg(long)]
        count: Option<usize>,
        /// Number of degraded clips.
        #[arg(long, default_value_t = 2)]
        clips: usize,
        /// Frames per degraded clip.
        #[arg(long, default_value_t = 24)]
        clip_len: usize,
    },
    /// Stage 1: contrastive pretraining of the degradation encoder.
    PretrainDam {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Stage 2: adversarial + cycle training of the single-frame model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory with checkpoints to start from (e.g. a pretrain run's final/).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Stage 3: propagation training on degraded clips.
    TrainDrpm {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory of degraded clip subdirectories.
        #[arg(long)]
        lq_clips: PathBuf,
        /// Stage-2 checkpoints to start from (required).
        #[arg(long)]
        init_from: PathBuf,
    },
    /// Enhance one image through the full-estimation path.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Checkpoint directory (omit for freshly initialized weights).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Enhance a frame directory with key-frame scheduling.
    EnhanceVideo {
        /// Input directory of frame_NNNNNN.png files plus frame_rate.txt.
        #[arg(long)]
        input: PathBuf,
        /// Output frame directory (also receives the per-frame CSV).
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Propagation interval override.
        #[arg(long)]
        delta_t: Option<usize>,
    },
    /// Quality metrics over enhanced images.
    Eval {
        /// Enhanced image file or directory.
        #[arg(long)]
        enhanced: PathBuf,
        /// Reference image file or directory (enables PSNR/SSIM).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Project degradation representations to 2-D and export coordinates.
    VizRepr {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Samples per (kind, level) cell.
        #[arg(long, default_value_t = 8)]
        per_cell: usize,
        /// Side length of the encoded crops.
        #[arg(long, default_value_t = 96)]
        patch: usize,
    },
    /// Parameter counts and analytic FLOPs for every component.
    Budget {
        /// Input height used for FLOPs accounting.
        #[arg(long, default_value_t = 320)]
        height: usize,
        /// Input width used for FLOPs accounting.
        #[arg(long, default_value_t = 320)]
        width: usize,
    },
}

fn dispatch(cli: Cli) -> lucid_core::Result<()> {
    let cfg = RunConfig::effective(cli.config.as_deref(), cli.seed)?;
    let out_dir = cli.out_dir;
    cfg.snapshot(&out_dir)?;
    match cli.command {
        Command::Degrade { corpus, split, count, clips, clip_len } => {
            let split = Split::parse(&split)?;
            let count = count.unwrap_or(cfg.data.pairs);
            commands::degrade_cmd(&cfg, &out_dir, &corpus, split, count, clips, clip_len)
        }
        Command::PretrainDam { corpus } => commands::pretrain_cmd(&cfg, &out_dir, &corpus),
        Command::Train { corpus, init_from } => {
            commands::train_cmd(&cfg, &out_dir, &corpus, init_from.as_deref())
        }
        Command::TrainDrpm { corpus, lq_clips, init_from } => {
            commands::train_drpm_cmd(&cfg, &out_dir, &corpus, &lq_clips, &init_from)
        }
        Command::Enhance { input, output, weights } => {
            commands::enhance_cmd(&cfg, &input, &output, weights.as_deref())
        }
        Command::EnhanceVideo { input, output, weights, delta_t } => {
            commands::enhance_video_cmd(&cfg, &input, &output, weights.as_deref(), delta_t)
        }
        Command::Eval { enhanced, reference } => {
            commands::eval_cmd(&out_dir, &enhanced, reference.as_deref())
        }
        Command::VizRepr { corpus, weights, per_cell, patch } => {
            commands::viz_repr_cmd(&cfg, &out_dir, &corpus, weights.as_deref(), per_cell, patch)
        }
        Command::Budget { height, width } => commands::budget_cmd(&cfg, height, width),
    }
}

/// Run the CLI on explicit arguments; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
