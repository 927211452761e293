use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dzsr_core::checkpoint::Checkpoint;
use dzsr_core::config::TrainConfig;
use dzsr_core::data::{generate_dataset, GenConfig, PairConfig};
use dzsr_core::image::Image;
use dzsr_core::model::AblationMode;
use dzsr_core::train::{
    degradation_checkpoint, evaluate, infer, load_dataset, load_degradation, train_degradation, train_selfdzsr,
};

/// Self-supervised dual-zoom reference super-resolution.
///
/// `DZSR_THREADS` caps worker threads; set it to 1 for bit-reproducible runs.
#[derive(Parser)]
#[command(name = "dzsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dual-zoom dataset.
    GenData {
        #[arg(long, default_value_t = 32)]
        scenes: usize,
        #[arg(long, default_value_t = 2)]
        ratio: usize,
        /// Maximum telephoto misalignment in HR pixels.
        #[arg(long, default_value_t = 3.0)]
        warp_bound: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// LR crop side; scenes are `lr_size * ratio^2` pixels square.
        #[arg(long, default_value_t = 32)]
        lr_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: fit the degradation network.
    TrainDegradation {
        #[arg(long)]
        data: PathBuf,
        /// `key=value` training config; missing keys keep desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the zooming network.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint; required unless the ablation drops the pseudo-LR.
        #[arg(long)]
        deg_ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// full, no_lr_align, no_ref_align, none, stn or deform_direct.
        #[arg(long, default_value = "full")]
        ablation: AblationMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve a short-focus image with its telephoto reference.
    Infer {
        #[arg(long)]
        short: PathBuf,
        #[arg(long)]
        tele: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a zooming checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV table; the summary goes next to it with a `.txt` extension.
        #[arg(long)]
        report: PathBuf,
    },
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn samples(dir: &Path) -> Result<Vec<dzsr_core::data::DualZoomSample>> {
    let named = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(named.into_iter().map(|(_, s)| s).collect())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            scenes,
            ratio,
            warp_bound,
            seed,
            lr_size,
            out,
        } => {
            let cfg = GenConfig {
                scenes,
                ratio,
                lr_size,
                pair: PairConfig {
                    warp_bound,
                    ..PairConfig::default()
                },
                seed,
            };
            let dirs = generate_dataset(&out, &cfg)?;
            println!("wrote {} samples to {}", dirs.len(), out.display());
        }
        Command::TrainDegradation {
            data,
            config,
            seed,
            out,
        } => {
            let cfg = train_config(config.as_deref(), seed)?;
            let run = train_degradation(&samples(&data)?, &cfg)?;
            let last = run.log.last().context("no training steps")?;
            println!(
                "centroid term {:.4e} -> {:.4e}; final l1 {:.5}",
                run.initial_centroid,
                run.net.centroid_term(),
                last.l1
            );
            degradation_checkpoint(&run.net, &cfg).save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Train {
            data,
            deg_ckpt,
            config,
            seed,
            ablation,
            out,
        } => {
            let cfg = train_config(config.as_deref(), seed)?;
            let degradation = match (&deg_ckpt, ablation.needs_pseudo()) {
                (Some(path), true) => {
                    let ckpt = Checkpoint::load(path)?;
                    let stage1 = TrainConfig::parse_text(&ckpt.config)?;
                    Some(load_degradation(&ckpt, &stage1)?)
                }
                (None, true) => bail!("--ablation {ablation} needs --deg-ckpt"),
                (_, false) => None,
            };
            let run = train_selfdzsr(&samples(&data)?, degradation, &cfg, ablation)?;
            if let Some(last) = run.log.last() {
                println!("final loss {:.5} (l1 {:.5})", last.total, last.l1);
            }
            run.checkpoint().save(&out)?;
            println!("saved {}", out.display());
        }
        Command::Infer { short, tele, ckpt, out } => {
            let s = Image::load_png(&short)?;
            let t = Image::load_png(&tele)?;
            let y = infer(&s, &t, &Checkpoint::load(&ckpt)?)?;
            y.save_png16(&out)?;
            println!("wrote {}x{} output to {}", y.width(), y.height(), out.display());
        }
        Command::Eval { data, ckpt, report } => {
            let rep = evaluate(&data, &Checkpoint::load(&ckpt)?)?;
            log::info!("evaluation took {:.2}s", rep.runtime_secs);
            write(&report, &rep.to_csv())?;
            let summary = rep.summary();
            write(&report.with_extension("txt"), &summary)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
