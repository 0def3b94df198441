//! `fmprune` command-line driver: train a run, analyze its feature-map
//! dumps, and report FLOPs and segmentation quality.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fmprune::harness::{analyze_run, report_run, run_training, TrainConfig};

#[derive(Parser)]
#[command(name = "fmprune", version, about = "Single-phase filter pruning for small U-Nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (and prune) a U-Net on the synthetic dataset.
    Train {
        /// TOML config; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Keep the regularizer but never remove filters.
        #[arg(long)]
        no_prune: bool,
        /// Dump probe feature maps every epoch.
        #[arg(long)]
        capture_maps: bool,
        /// Run directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Clusterability measures and trends from a run's feature-map dumps.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// FLOPs reduction, Dice/HD95 per epoch and the prune timeline.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, lambda, no_prune, capture_maps, out } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            cfg.pruning_enabled &= !no_prune;
            cfg.capture_feature_maps |= capture_maps;
            cfg.validate()?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let run = run_training(&cfg, &out)?;
            for m in &run.metrics {
                println!(
                    "epoch {:>3}  train {:.4}  val {:.4}  dice {:.3}  live {:>4}  flops {:>10}  {:.1}s",
                    m.epoch,
                    m.train_loss,
                    m.val_loss,
                    m.mean_dice(),
                    m.live_filters_total,
                    m.flops,
                    m.seconds
                );
            }
            let s = &run.summary;
            println!(
                "flops {} -> {} ({:.1}% reduction), {} prune events, test dice {:.3}, test hd95 {:.2}",
                s.initial_flops,
                s.final_flops,
                s.flops_reduction,
                s.prune_events,
                s.test.mean_dice(),
                s.test.mean_hd95()
            );
        }
        Command::Analyze { run } => {
            let out = analyze_run(&run)?;
            println!("{} layer-epoch rows", out.report.rows.len());
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Report { run } => {
            let out = report_run(&run)?;
            println!(
                "flops {} -> {} ({:.2}% reduction)",
                out.initial_flops,
                out.final_flops,
                out.flops_reduction
            );
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
