//! `vpa`: phantoms, augmentation, training, ablation and segmentation from
//! the command line.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vpa_core::train::arm_by_name;

#[derive(Parser)]
#[command(name = "vpa", version, about = "Template-based 3D brain segmentation")]
struct Cli {
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VPA_THREADS")]
    threads: Option<usize>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic template, its label and an evaluation subject.
    Phantom {
        /// N or X,Y,Z.
        #[arg(long, value_parser = commands::parse_dims)]
        dims: Option<[usize; 3]>,
        #[arg(long, value_enum, default_value = "a")]
        variant: Variant,
        /// Seed of the evaluation subject's perturbation.
        #[arg(long, default_value_t = 1)]
        perturb_seed: u64,
    },
    /// Train a model on augmented copies of the template.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write augmented pairs and a montage of their central slices.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Segment an image with a trained checkpoint.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Reference label; Dice is printed when given.
        #[arg(long)]
        label: Option<PathBuf>,
    },
    /// Train one model per augmentation arm and plot their error curves.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated arm names; default from the config.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
    },
    /// Print the error split and Dice of a checkpoint on one labelled image.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = cli.out.as_deref();
    let default_out = || out.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Phantom {
            dims,
            variant,
            perturb_seed,
        } => commands::phantom(&commands::PhantomArgs {
            out: default_out(),
            dims,
            variant_b: matches!(variant, Variant::B),
            seed: cli.seed,
            perturb_seed,
        }),
        Command::Train { config } => commands::train(&commands::load_config(&config, cli.seed, out)?),
        Command::Augment { config, count } => commands::augment(&commands::load_config(&config, cli.seed, out)?, count),
        Command::Segment {
            checkpoint,
            image,
            label,
        } => commands::segment(&commands::SegmentArgs {
            checkpoint,
            image,
            label,
            out: default_out(),
        }),
        Command::Ablate { config, arms } => {
            let cfg = commands::load_config(&config, cli.seed, out)?;
            let arms = if arms.is_empty() {
                cfg.ablation.arms()?
            } else {
                arms.iter().map(|a| arm_by_name(a)).collect::<Result<_, _>>()?
            };
            commands::ablate(&cfg, &arms)
        }
        Command::Evaluate {
            checkpoint,
            image,
            label,
        } => {
            println!("{}", commands::evaluate(&checkpoint, &image, &label)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
