use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tta_core::corrupt::{build_corrupted_set, CorruptionSpec};
use tta_core::data::{synthetic_shapes, ImageSet, ShapesConfig};
use tta_core::engine::{Method, Protocol};
use tta_core::harness::{self, RunConfig};
use tta_core::nn::{checkpoint, Architecture};
use tta_core::train::{train_source, TrainConfig};

#[derive(Parser)]
#[command(name = "tta", version, about = "Test-time adaptation with a mean teacher and learned adversarial augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt a source checkpoint on an image set and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// N-O (one pass) or N-M (multi-epoch).
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        seed: Option<u64>,
        /// tesla, source_only, entropy_min, pl_hard or bn_stats.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subdirectory of the dataset to adapt on.
        #[arg(long)]
        split: Option<String>,
        /// Continue from saved run state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write a corrupted copy of an image set.
    Corrupt {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        severity: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write encoder features of every image as CSV.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic ten-class shapes set.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        texture: f64,
        #[arg(long, default_value_t = 0.15)]
        contrast_min: f64,
        #[arg(long, default_value_t = 0.4)]
        contrast_max: f64,
    },
    /// Train a source model on a labeled image set.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_augment: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            protocol,
            seed,
            method,
            out,
            split,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let a = &mut cfg.adaptation;
            if let Some(p) = protocol {
                a.protocol = p;
                if p == Protocol::OnePass {
                    a.epochs = 1;
                }
            }
            if let Some(s) = seed {
                a.seed = s;
            }
            if let Some(m) = method {
                a.method = m;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if split.is_some() {
                cfg.split = split;
            }
            let outcome = harness::run_experiment(&cfg, resume)?;
            println!("{}", serde_json::to_string(&outcome.summary)?);
        }
        Command::Corrupt {
            clean,
            name,
            severity,
            seed,
            out,
        } => {
            let spec = CorruptionSpec::new(&name, severity, seed)?;
            let set = ImageSet::load(&clean)?;
            let corrupted = build_corrupted_set(&set, &spec)?;
            let manifest = corrupted.save(&out)?;
            println!("{} images -> {} (sha256 {})", manifest.count, out.display(), manifest.images_sha256);
        }
        Command::ExportFeatures { ckpt, data, out } => {
            let (rows, cols) = harness::export_features(&ckpt, &data, &out)?;
            println!("{rows} x {cols} features -> {}", out.display());
        }
        Command::MakeDataset {
            out,
            count,
            seed,
            texture,
            contrast_min,
            contrast_max,
        } => {
            let cfg = ShapesConfig {
                texture,
                contrast: (contrast_min, contrast_max),
                ..ShapesConfig::default()
            };
            let manifest = synthetic_shapes(count, seed, &cfg).save(&out)?;
            println!("{} images -> {} (sha256 {})", manifest.count, out.display(), manifest.images_sha256);
        }
        Command::TrainSource {
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            no_augment,
        } => {
            let set = ImageSet::load(&data)?;
            let (c, h, w) = set.shape();
            let arch = Architecture {
                in_channels: c,
                height: h,
                width: w,
                ..Architecture::desk(set.num_classes)
            };
            let cfg = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                seed,
                augment: !no_augment,
            };
            let model = train_source(&set, arch, &cfg)?;
            checkpoint::save(&model, &out)?;
            println!("source model -> {}", out.display());
        }
    }
    Ok(())
}
