use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use switchunet::commands::{self, Overrides};

#[derive(Parser)]
#[command(name = "switchunet", version, about = "Switch-configurable recurrent/residual/attention U-Net segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model described by a JSON run config
    Train {
        /// Run-config file (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's dataset manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Override the config's model name
        #[arg(long)]
        model: Option<String>,
    },
    /// Write {0,255} PNG masks for an image or a directory of images
    Predict {
        /// Checkpoint matching the declared model
        #[arg(long)]
        checkpoint: PathBuf,
        /// Named model (attention-unet | r2u-net | s-r2u-net | s-r2f2u-net | s-r2f2-attn-u-net)
        #[arg(long)]
        model: Option<String>,
        /// Run-config file declaring the model instead of --model
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input PNG file or directory
        #[arg(long)]
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one manifest split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (image,mask,category,split)
        #[arg(long)]
        manifest: PathBuf,
        /// Split to evaluate (train | val | test)
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-layer parameter table of a model
    Params {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export per-decoder-level feature maps as grayscale PNGs
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input PNG image
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> switchunet::Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out, manifest, model } => {
            commands::cmd_train(&config, &Overrides { seed, out, manifest, model })
        }
        Cmd::Predict { checkpoint, model, config, input, out } => {
            commands::cmd_predict(&checkpoint, &model, &config, &input, &out)
        }
        Cmd::Evaluate { checkpoint, model, config, manifest, split, out } => {
            commands::cmd_evaluate(&checkpoint, &model, &config, &manifest, &split, &out)
        }
        Cmd::Params { model, config } => commands::cmd_params(&model, &config),
        Cmd::Features { checkpoint, model, config, image, out } => {
            commands::cmd_features(&checkpoint, &model, &config, &image, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
