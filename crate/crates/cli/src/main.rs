use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use mdet_core::commands::{self, VAL_SPLIT};
use mdet_core::config::{parse_sizes, RunConfig};
use mdet_core::{Error, Result};

/// Maritime object detection with a pruned state-space backbone.
#[derive(Parser, Debug)]
#[command(name = "mdet", version)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; MDET_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/val dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a detector on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Report AP50 and foreground accuracy for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = VAL_SPLIT)]
        split: String,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every query's detection here as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Time scan, attention and convolution kernels over sequence lengths.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sequence lengths.
        #[arg(long)]
        sizes: Option<String>,
    },
    /// Dump token scores and draw the kept/dropped patch grid for one image.
    PruneViz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// COCO file listing the image, for patch labels.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the pruning ratio stored with the checkpoint.
        #[arg(long)]
        ratio: Option<f64>,
    },
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("MDET_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .ok()
            .filter(|&n: &usize| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("MDET_THREADS={v:?} is not a positive integer"))),
        Err(_) => Ok(flag),
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(cli, &mut cfg)?;
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) -> Result<()> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = threads(cli.threads)? {
        cfg.train.threads = n;
    }
    cfg.validate()
}

/// Config stored beside a checkpoint unless `--config` is given.
fn checkpoint_config(cli: &Cli, checkpoint: &Path) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => commands::config_for_checkpoint(checkpoint, &RunConfig::default())?,
    };
    apply_overrides(cli, &mut cfg)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = threads(cli.threads)? {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon_pool(n);
    }
    match &cli.command {
        Command::Gen { out, force } => {
            let cfg = base_config(cli)?;
            let s = commands::cmd_gen(&cfg, out, *force)?;
            info!(
                "wrote {} train and {} val scenes to {}",
                s.train,
                s.val,
                out.display()
            );
        }
        Command::Train { data, out, force } => {
            let cfg = base_config(cli)?;
            let outcome = commands::cmd_train(&cfg, data, out, *force)?;
            if let (Some(first), Some(last)) = (outcome.logs.first(), outcome.logs.last()) {
                info!(
                    "L_Hungarian {:.4} -> {:.4}, L_patch {:.4} -> {:.4}",
                    first.hungarian, last.hungarian, first.patch, last.patch
                );
            }
            info!(
                "checkpoint written to {}",
                out.join(commands::CHECKPOINT).display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            predictions,
        } => {
            let cfg = checkpoint_config(cli, checkpoint)?;
            let report = commands::cmd_eval(&cfg, checkpoint, data, split, predictions.as_deref())?;
            let text = report.to_text();
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(path, &text).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
        }
        Command::Bench { out, sizes } => {
            let mut cfg = base_config(cli)?;
            if let Some(s) = sizes {
                cfg.bench.sizes = parse_sizes(s)?;
            }
            let res = commands::cmd_bench(&cfg, out)?;
            for r in &res.runs {
                match r.fit {
                    Some(f) => info!("{}: slope {:.3} (r2 {:.3})", r.kernel, f.slope, f.r2),
                    None => warn!("{}: slope omitted, fewer than two timed sizes", r.kernel),
                }
            }
            info!("wrote {} and {}", res.csv.display(), res.svg.display());
        }
        Command::PruneViz {
            checkpoint,
            image,
            annotations,
            out,
            ratio,
        } => {
            let mut cfg = checkpoint_config(cli, checkpoint)?;
            if let Some(r) = ratio {
                cfg.model.prune_ratio = *r;
                cfg.validate()?;
            }
            let ann = match annotations {
                Some(a) => {
                    let found = commands::find_annotation(a, image)?;
                    if found.is_none() {
                        warn!(
                            "{} is not listed in {}; labels left empty",
                            image.display(),
                            a.display()
                        );
                    }
                    found
                }
                None => None,
            };
            let viz = commands::cmd_prune_viz(&cfg, checkpoint, image, ann.as_ref(), out)?;
            info!(
                "{} tokens, {} kept, {} dropped; wrote {} and {}",
                viz.grid.tokens(),
                viz.decision.kept.len(),
                viz.decision.dropped.len(),
                viz.csv.display(),
                viz.svg.display()
            );
        }
    }
    Ok(())
}

fn rayon_pool(n: usize) -> std::result::Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
