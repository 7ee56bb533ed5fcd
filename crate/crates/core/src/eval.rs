//! AP at IoU 0.5 (overall and per size band) and foreground-classifier accuracy.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::boxes::PixelBox;
use crate::error::{Error, Result};
use crate::head::DetectionSet;
use crate::model::{Detector, Sample};
use crate::params::ParamStore;
use crate::pruner::{generate_patch_labels, PruneDecision};
use crate::synth::{size_band, SceneAnnotation, SizeBand};
use crate::tensor::Real;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub query: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: PixelBox,
}

/// One detection per query: the most probable real class and its probability.
pub fn detections_from_set<T: Real>(
    set: &DetectionSet<T>,
    image: usize,
    width: usize,
    height: usize,
) -> Result<Vec<Detection>> {
    let probs = set.probabilities()?;
    let classes = set.num_classes();
    Ok((0..set.queries())
        .map(|q| {
            let row = probs.row(q);
            let (class, score) = (0..classes).fold((0, f64::NEG_INFINITY), |best, c| {
                let p = row[c].as_f64();
                if p > best.1 {
                    (c, p)
                } else {
                    best
                }
            });
            let b = set.box_at(q).map(|v| v.as_f64());
            Detection {
                image,
                query: q,
                class,
                score,
                bbox: PixelBox::from_normalized(b, width, height),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive(usize),
    FalsePositive,
    Ignored,
}

/// Greedy matching of score-ordered detections to ground truths: each
/// detection takes the unmatched box of highest IoU (lowest index on ties)
/// if that IoU reaches the threshold. Ignored boxes are only used once no
/// regular box qualifies, and detections landing on them are ignored.
pub fn match_image(
    dets: &[PixelBox],
    gts: &[PixelBox],
    ignore: &[bool],
    threshold: f64,
) -> Vec<Outcome> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = |want_ignored: bool| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    if taken[j] || ignore[j] != want_ignored {
                        continue;
                    }
                    let iou = d.iou(g);
                    if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                best
            };
            if let Some((j, _)) = best(false) {
                taken[j] = true;
                Outcome::TruePositive(j)
            } else if let Some((j, _)) = best(true) {
                taken[j] = true;
                Outcome::Ignored
            } else {
                Outcome::FalsePositive
            }
        })
        .collect()
}

pub fn greedy_match(dets: &[PixelBox], gts: &[PixelBox], threshold: f64) -> Vec<Option<usize>> {
    match_image(dets, gts, &vec![false; gts.len()], threshold)
        .into_iter()
        .map(|o| match o {
            Outcome::TruePositive(j) => Some(j),
            _ => None,
        })
        .collect()
}

/// Area under the precision/recall curve with the precision envelope made
/// non-increasing. `hits` are in descending score order.
pub fn average_precision(hits: &[bool], positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

/// AP50 averaged over classes that have ground truth in scope. With a band,
/// boxes of other bands are ignored, as are unmatched detections whose own
/// area falls outside it.
pub fn ap50(
    dets: &[Detection],
    truths: &[SceneAnnotation],
    classes: usize,
    band: Option<SizeBand>,
) -> Option<f64> {
    let in_band = |b: &PixelBox| band.is_none_or(|band| size_band(b) == band);
    let mut per_class = Vec::new();
    for c in 0..classes {
        let mut scored: Vec<(f64, usize, bool)> = Vec::new();
        let mut positives = 0;
        for (i, truth) in truths.iter().enumerate() {
            let (gts, ignore): (Vec<PixelBox>, Vec<bool>) = truth
                .boxes
                .iter()
                .zip(&truth.class_ids)
                .filter(|(_, &k)| k == c)
                .map(|(b, _)| (*b, !in_band(b)))
                .unzip();
            positives += ignore.iter().filter(|&&x| !x).count();
            let mut mine: Vec<&Detection> = dets
                .iter()
                .filter(|d| d.image == i && d.class == c)
                .collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            let boxes: Vec<PixelBox> = mine.iter().map(|d| d.bbox).collect();
            for (d, o) in mine
                .iter()
                .zip(match_image(&boxes, &gts, &ignore, IOU_THRESHOLD))
            {
                match o {
                    Outcome::TruePositive(_) => scored.push((d.score, i, true)),
                    Outcome::FalsePositive if in_band(&d.bbox) => scored.push((d.score, i, false)),
                    _ => {}
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = scored.iter().map(|s| s.2).collect();
        if let Some(ap) = average_precision(&hits, positives) {
            per_class.push(ap);
        }
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

/// Classifier statistics accumulated over images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForegroundStats {
    pub patches: usize,
    pub correct: usize,
    /// Object-overlapping patches per band and how many scored as foreground.
    pub band_patches: [usize; 3],
    pub band_detected: [usize; 3],
    pub foreground: usize,
    pub foreground_kept: usize,
}

impl ForegroundStats {
    pub fn add(
        &mut self,
        sample_grid: &crate::tokenizer::PatchGrid,
        truth: &SceneAnnotation,
        decision: &PruneDecision,
    ) -> Result<()> {
        let labels = generate_patch_labels(sample_grid, &truth.boxes)?;
        let kept: std::collections::HashSet<usize> = decision.kept.iter().copied().collect();
        for (i, (&l, &s)) in labels.labels.iter().zip(&decision.scores).enumerate() {
            self.patches += 1;
            self.correct += ((s >= FOREGROUND_THRESHOLD) == (l == 1)) as usize;
            if l == 1 {
                self.foreground += 1;
                self.foreground_kept += kept.contains(&i) as usize;
            }
        }
        for band in SizeBand::ALL {
            let boxes: Vec<PixelBox> = truth
                .boxes
                .iter()
                .filter(|b| size_band(b) == band)
                .copied()
                .collect();
            if boxes.is_empty() {
                continue;
            }
            let band_labels = generate_patch_labels(sample_grid, &boxes)?;
            for (&l, &s) in band_labels.labels.iter().zip(&decision.scores) {
                if l == 1 {
                    self.band_patches[band.index()] += 1;
                    self.band_detected[band.index()] += (s >= FOREGROUND_THRESHOLD) as usize;
                }
            }
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.correct, self.patches)
    }

    pub fn band_accuracy(&self, band: SizeBand) -> Option<f64> {
        ratio(
            self.band_detected[band.index()],
            self.band_patches[band.index()],
        )
    }

    pub fn kept_recall(&self) -> Option<f64> {
        ratio(self.foreground_kept, self.foreground)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truths: usize,
    pub band_counts: [usize; 3],
    pub ap50: Option<f64>,
    pub ap50_band: [Option<f64>; 3],
    pub foreground: ForegroundStats,
}

impl EvalReport {
    pub fn from_parts(
        dets: &[Detection],
        truths: &[SceneAnnotation],
        classes: usize,
        foreground: ForegroundStats,
    ) -> Self {
        let mut band_counts = [0; 3];
        for b in truths.iter().flat_map(|t| t.boxes.iter()) {
            band_counts[size_band(b).index()] += 1;
        }
        Self {
            images: truths.len(),
            ground_truths: band_counts.iter().sum(),
            band_counts,
            ap50: ap50(dets, truths, classes, None),
            ap50_band: SizeBand::ALL.map(|b| ap50(dets, truths, classes, Some(b))),
            foreground,
        }
    }

    pub fn to_text(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "# AP at a single IoU threshold of 0.5");
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "ground_truths = {}", self.ground_truths);
        let _ = writeln!(s, "ap50 = {}", f(self.ap50));
        for band in SizeBand::ALL {
            let _ = writeln!(
                s,
                "ap50_{} = {}",
                band.name(),
                f(self.ap50_band[band.index()])
            );
        }
        let _ = writeln!(s, "foreground_accuracy = {}", f(self.foreground.accuracy()));
        for band in SizeBand::ALL {
            let _ = writeln!(
                s,
                "foreground_accuracy_{} = {}",
                band.name(),
                f(self.foreground.band_accuracy(band))
            );
        }
        let _ = writeln!(
            s,
            "foreground_kept_recall = {}",
            f(self.foreground.kept_recall())
        );
        for band in SizeBand::ALL {
            let _ = writeln!(
                s,
                "count_{} = {}",
                band.name(),
                self.band_counts[band.index()]
            );
        }
        s
    }
}

/// One JSON object per line: `image`, `query`, `class`, `score` and
/// `bbox = [x, y, w, h]` in pixels.
pub fn write_predictions<W: std::io::Write>(mut out: W, dets: &[Detection]) -> std::io::Result<()> {
    for d in dets {
        let line = serde_json::json!({
            "image": d.image,
            "query": d.query,
            "class": d.class,
            "score": d.score,
            "bbox": [d.bbox.x, d.bbox.y, d.bbox.width, d.bbox.height],
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Inverse of [`write_predictions`]; blank lines are skipped.
pub fn read_predictions(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = |detail: String| Error::format(path, Some(i), detail);
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let index = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_u64())
                .map(|x| x as usize)
                .ok_or_else(|| bad(format!("missing integer {k:?}")))
        };
        let score = v
            .get("score")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| bad("missing number \"score\"".into()))?;
        let b: Vec<f64> = v
            .get("bbox")
            .and_then(|x| x.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
            .filter(|b: &Vec<f64>| b.len() == 4)
            .ok_or_else(|| bad("\"bbox\" must be [x, y, w, h]".into()))?;
        dets.push(Detection {
            image: index("image")?,
            query: index("query")?,
            class: index("class")?,
            score,
            bbox: PixelBox::new(b[0], b[1], b[2], b[3]),
        });
    }
    Ok(dets)
}

/// Runs the model on every image (in parallel) and scores the predictions.
pub fn evaluate(
    model: &Detector,
    store: &ParamStore<f32>,
    samples: &[Sample<f32>],
    truths: &[SceneAnnotation],
) -> Result<EvalReport> {
    let (dets, fg) = predict_all(model, store, samples, truths)?;
    Ok(EvalReport::from_parts(
        &dets,
        truths,
        model.config.classes,
        fg,
    ))
}

/// Detections for every query of every image, plus classifier statistics.
pub fn predict_all(
    model: &Detector,
    store: &ParamStore<f32>,
    samples: &[Sample<f32>],
    truths: &[SceneAnnotation],
) -> Result<(Vec<Detection>, ForegroundStats)> {
    if samples.len() != truths.len() {
        return Err(Error::Annotation(format!(
            "{} images but {} annotations",
            samples.len(),
            truths.len()
        )));
    }
    let classes = model.config.classes;
    for t in truths {
        if let Some(&c) = t.class_ids.iter().find(|&&c| c >= classes) {
            return Err(Error::Config(format!(
                "dataset has class id {c} but the model predicts {classes} classes"
            )));
        }
    }
    let outputs: Vec<Result<(Vec<Detection>, PruneDecision)>> = samples
        .par_iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (s, t))| {
            let (set, decision) = model.predict(store, s)?;
            Ok((detections_from_set(&set, i, t.width, t.height)?, decision))
        })
        .collect();
    let mut dets = Vec::new();
    let mut fg = ForegroundStats::default();
    for ((out, s), t) in outputs.into_iter().zip(samples).zip(truths) {
        let (d, decision) = out?;
        dets.extend(d);
        fg.add(&s.grid, t, &decision)?;
    }
    Ok((dets, fg))
}
