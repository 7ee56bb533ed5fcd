//! The `gen`, `train`, `eval`, `bench` and `prune-viz` operations.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use rayon::prelude::*;

use crate::bench::{
    self, BenchKernel, ComplexityModel, CostArgs, Family, ScalingRun, TimingOptions,
};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{predict_all, write_predictions, EvalReport};
use crate::model::{prepare_sample, Detector, Sample};
use crate::params::ParamStore;
use crate::pruner::{generate_patch_labels, write_prune_csv, PruneDecision};
use crate::synth::{
    coco_read, coco_write, generate_scene, load_png, save_png, CocoImage, SceneAnnotation,
};
use crate::tokenizer::PatchGrid;
use crate::train::{train, TrainOutcome, TrainSinks};

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";
pub const ANNOTATIONS: &str = "annotations.json";
pub const CHECKPOINT: &str = "model.mdet";
pub const CONFIG: &str = "config.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_SVG: &str = "bench.svg";
pub const PRUNE_CSV: &str = "prune.csv";
pub const PRUNE_SVG: &str = "prune.svg";

/// Seed of scene `index` in a split, decorrelated from neighbouring indices.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    let tag = match split {
        TRAIN_SPLIT => 1u64,
        VAL_SPLIT => 2,
        _ => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 40) ^ index as u64
}

/// Fails unless `dir` is absent, empty, or `force` is set.
pub fn ensure_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub train: usize,
    pub val: usize,
}

fn gen_split(cfg: &RunConfig, dir: &Path, split: &str, count: usize) -> Result<()> {
    let split_dir = dir.join(split);
    let images_dir = split_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let scene = cfg.scene_config();
    let records: Vec<Result<CocoImage>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let (image, annotation) =
                generate_scene(&scene.with_seed(scene_seed(cfg.seed, split, i)))?;
            let file_name = format!("images/{split}_{i:05}.png");
            save_png(&image, &split_dir.join(&file_name))?;
            Ok(CocoImage {
                file_name,
                annotation,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    coco_write(&records, &split_dir.join(ANNOTATIONS))
}

/// Writes `train/` and `val/` splits, each PNGs plus one COCO file.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenSummary> {
    cfg.validate()?;
    cfg.scene_config().validate()?;
    ensure_output_dir(out, force)?;
    gen_split(cfg, out, TRAIN_SPLIT, cfg.data.train_scenes)?;
    gen_split(cfg, out, VAL_SPLIT, cfg.data.val_scenes)?;
    Ok(GenSummary {
        train: cfg.data.train_scenes,
        val: cfg.data.val_scenes,
    })
}

/// Loads one split as model inputs and annotations.
pub fn load_split(
    data: &Path,
    split: &str,
    patch: usize,
) -> Result<(Vec<Sample<f32>>, Vec<SceneAnnotation>)> {
    let split_dir = data.join(split);
    let records = coco_read(&split_dir.join(ANNOTATIONS))?;
    let loaded: Vec<Result<(Sample<f32>, SceneAnnotation)>> = records
        .into_par_iter()
        .map(|r| {
            let image = load_png(&split_dir.join(&r.file_name))?;
            let sample = prepare_sample(&image, &r.annotation, patch)?;
            Ok((sample, r.annotation))
        })
        .collect();
    let pairs = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

fn check_classes(cfg: &RunConfig, truths: &[SceneAnnotation]) -> Result<()> {
    for t in truths {
        if let Some(&c) = t.class_ids.iter().find(|&&c| c >= cfg.model.classes) {
            return Err(Error::Config(format!(
                "dataset uses class id {c} but the model has {} classes",
                cfg.model.classes
            )));
        }
    }
    Ok(())
}

/// Trains from `data/train` and writes the checkpoint, config and step log to `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (samples, truths) = load_split(data, TRAIN_SPLIT, cfg.model.patch)?;
    check_classes(cfg, &truths)?;
    ensure_output_dir(out, force)?;
    cfg.save(&out.join(CONFIG))?;
    let (model, mut store) = Detector::new(&cfg.model, cfg.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let ckpt = out.join(CHECKPOINT);
    let outcome = train(
        &model,
        &mut store,
        &samples,
        &cfg.train,
        cfg.seed,
        TrainSinks {
            checkpoint: Some(&ckpt),
            log: Some(&mut log),
        },
    );
    std::io::Write::flush(&mut log).map_err(|e| Error::io(&log_path, e))?;
    outcome
}

/// The run config stored next to a checkpoint, or `fallback` when absent.
pub fn config_for_checkpoint(checkpoint: &Path, fallback: &RunConfig) -> Result<RunConfig> {
    let path = checkpoint
        .parent()
        .map(|p| p.join(CONFIG))
        .unwrap_or_else(|| PathBuf::from(CONFIG));
    if path.exists() {
        RunConfig::load(&path)
    } else {
        Ok(fallback.clone())
    }
}

/// Rebuilds the model for `cfg` and fills it from a checkpoint file.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Detector, ParamStore<f32>)> {
    let (model, mut store) = Detector::new(&cfg.model, cfg.seed)?;
    let loaded = checkpoint::load::<f32>(checkpoint)?;
    let classes = loaded
        .find("head.class.weight")
        .map(|id| loaded.get(id).shape().last().copied().unwrap_or(0));
    if let Some(c) = classes {
        if c != cfg.model.classes + 1 {
            return Err(Error::Config(format!(
                "checkpoint predicts {} classes but the config has {}",
                c.saturating_sub(1),
                cfg.model.classes
            )));
        }
    }
    checkpoint::restore_into(&mut store, &loaded, checkpoint)?;
    Ok((model, store))
}

/// Scores a checkpoint on a split; with `predictions`, every query's
/// detection is also written there as JSON lines.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    predictions: Option<&Path>,
) -> Result<EvalReport> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let (samples, truths) = load_split(data, split, cfg.model.patch)?;
    check_classes(cfg, &truths)?;
    let (dets, fg) = predict_all(&model, &store, &samples, &truths)?;
    if let Some(path) = predictions {
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        write_predictions(&mut f, &dets).map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut f).map_err(|e| Error::io(path, e))?;
    }
    Ok(EvalReport::from_parts(
        &dets,
        &truths,
        model.config.classes,
        fg,
    ))
}

pub struct BenchOutput {
    pub runs: Vec<ScalingRun>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Times every kernel over the configured sizes and writes the CSV and SVG.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<BenchOutput> {
    let b = &cfg.bench;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let opts = TimingOptions {
        repetitions: b.repetitions,
        warmups: b.warmups,
    };
    let runs = BenchKernel::ALL
        .iter()
        .map(|&k| bench::bench_kernel(k, &b.sizes, b.dim, b.state, opts))
        .collect::<Result<Vec<_>>>()?;
    let models =
        [Family::Transformer, Family::Mamba, Family::Cnn].map(|family| ComplexityModel { family });
    let args = CostArgs {
        tokens: 0.0,
        dim: b.dim as f64,
        height: 0.0,
        patch: 1.0,
        kernel: 3.0,
        state: b.state as f64,
    };
    let (csv, svg) = (out.join(BENCH_CSV), out.join(BENCH_SVG));
    bench::emit_report(&runs, &models, &args, &csv, &svg)?;
    Ok(BenchOutput { runs, csv, svg })
}

pub struct PruneViz {
    pub decision: PruneDecision,
    pub grid: PatchGrid,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Grid overlay: kept cells outlined, dropped cells shaded.
pub fn prune_svg(png: &[u8], grid: &PatchGrid, decision: &PruneDecision) -> String {
    let (w, h) = (grid.image_width(), grid.image_height());
    let z = grid.patch;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<image width="{w}" height="{h}" xlink:href="data:image/png;base64,{}"/>"#,
        base64::engine::general_purpose::STANDARD.encode(png)
    );
    let mut kept = vec![false; grid.tokens()];
    for &i in &decision.kept {
        kept[i] = true;
    }
    for (i, &(r, c)) in grid.positions().iter().enumerate() {
        let (x, y) = (c * z, r * z);
        let (cw, ch) = (z.min(w.saturating_sub(x)), z.min(h.saturating_sub(y)));
        if kept[i] {
            let _ = writeln!(
                s,
                r##"<rect class="kept" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="none" stroke="#2ca02c" stroke-width="1"/>"##
            );
        } else {
            let _ = writeln!(
                s,
                r##"<rect class="dropped" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="#000" fill-opacity="0.55" stroke="#555" stroke-width="0.5"/>"##
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Scores one image, writes the per-token CSV and the overlay. Labels are
/// filled in when `annotation` is given.
pub fn cmd_prune_viz(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    annotation: Option<&SceneAnnotation>,
    out: &Path,
) -> Result<PruneViz> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let pixels = load_png(image)?;
    let (_, h, w) = pixels.dims3()?;
    if cfg.model.patch > h.min(w) {
        return Err(Error::Config(format!(
            "patch {} does not fit a {h}x{w} image",
            cfg.model.patch
        )));
    }
    let ann = annotation
        .cloned()
        .unwrap_or_else(|| SceneAnnotation::empty(h, w));
    let sample = prepare_sample(&pixels, &ann, cfg.model.patch)?;
    let (_, decision) = model.predict(&store, &sample)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join(PRUNE_CSV);
    let labels = match annotation {
        Some(a) => Some(generate_patch_labels(&sample.grid, &a.boxes)?),
        None => None,
    };
    let mut f = BufWriter::new(File::create(&csv).map_err(|e| Error::io(&csv, e))?);
    write_prune_csv(&mut f, &sample.grid, &decision, labels.as_ref())
        .map_err(|e| Error::io(&csv, e))?;
    std::io::Write::flush(&mut f).map_err(|e| Error::io(&csv, e))?;
    let png = std::fs::read(image).map_err(|e| Error::io(image, e))?;
    let svg = out.join(PRUNE_SVG);
    std::fs::write(&svg, prune_svg(&png, &sample.grid, &decision))
        .map_err(|e| Error::io(&svg, e))?;
    Ok(PruneViz {
        decision,
        grid: sample.grid,
        csv,
        svg,
    })
}

/// Annotation of `image` from the COCO file of its split, if listed there.
pub fn find_annotation(annotations: &Path, image: &Path) -> Result<Option<SceneAnnotation>> {
    let records = coco_read(annotations)?;
    let base = annotations.parent().unwrap_or(Path::new("."));
    let target = image.canonicalize().map_err(|e| Error::io(image, e))?;
    Ok(records
        .into_iter()
        .find(|r| {
            base.join(&r.file_name)
                .canonicalize()
                .map(|p| p == target)
                .unwrap_or(false)
        })
        .map(|r| r.annotation))
}
