//! Foreground/background token pruning: patch labels, scoring, top-K
//! selection, reassembly and the counter-weighted BCE loss.

use std::io::Write;

use crate::autodiff::{Graph, Var};
use crate::boxes::PixelBox;
use crate::error::{Error, Result};
use crate::layers::Mlp;
use crate::params::{Bound, Init, ParamStore};
use crate::ssm::{BlockOptions, SsmStack};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::PatchGrid;

/// Guards the foreground count in the class weight.
pub const WEIGHT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabels {
    pub labels: Vec<u8>,
    pub fore_count: usize,
    pub back_count: usize,
}

impl PatchLabels {
    pub fn from_labels(labels: Vec<u8>) -> Self {
        let fore_count = labels.iter().filter(|&&l| l == 1).count();
        let back_count = labels.len() - fore_count;
        Self {
            labels,
            fore_count,
            back_count,
        }
    }

    /// Flattens the labels of several images into one batch.
    pub fn concat(parts: &[PatchLabels]) -> Self {
        Self::from_labels(
            parts
                .iter()
                .flat_map(|p| p.labels.iter().copied())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Marks a patch as foreground when it overlaps any box with positive area.
/// Both patches and boxes are clipped to the unpadded image first.
pub fn generate_patch_labels(grid: &PatchGrid, boxes: &[PixelBox]) -> Result<PatchLabels> {
    for b in boxes {
        b.validate()?;
    }
    let (img_w, img_h) = (grid.image_width() as f64, grid.image_height() as f64);
    let z = grid.patch as f64;
    let labels = grid
        .positions()
        .into_iter()
        .map(|(r, c)| {
            let px0 = c as f64 * z;
            let py0 = r as f64 * z;
            let px1 = (px0 + z).min(img_w);
            let py1 = (py0 + z).min(img_h);
            let hit = boxes.iter().any(|b| {
                let [bx0, by0, bx1, by1] = b.corners();
                let iw = px1.min(bx1.min(img_w)) - px0.max(bx0.max(0.0));
                let ih = py1.min(by1.min(img_h)) - py0.max(by0.max(0.0));
                iw > 0.0 && ih > 0.0
            });
            u8::from(hit)
        })
        .collect();
    Ok(PatchLabels::from_labels(labels))
}

/// Number of tokens kept at pruning ratio `r`: `round((1 − r)·T)`, halves up.
pub fn keep_count(tokens: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * tokens as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub ratio: f64,
}

/// Keeps the `round((1 − r)·T)` highest scores; equal scores prefer the
/// lower index. Both index lists come back sorted.
pub fn select_topk<T: Real>(scores: &[T], ratio: f64) -> Result<PruneDecision> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "pruning ratio {ratio} outside [0, 1)"
        )));
    }
    let scores: Vec<f64> = scores.iter().map(|s| s.as_f64()).collect();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("select_topk", "NaN score"));
    }
    let keep = keep_count(scores.len(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    let mut dropped = order[keep..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    Ok(PruneDecision {
        scores,
        kept,
        dropped,
        ratio,
    })
}

/// `w = M_back / (M_fore + ε)`.
pub fn class_weight(labels: &PatchLabels) -> f64 {
    labels.back_count as f64 / (labels.fore_count as f64 + WEIGHT_EPS)
}

pub(crate) fn check_bce_inputs(count: usize, labels: &PatchLabels) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if count != labels.len() {
        return Err(Error::shape(
            "weighted_bce",
            format!("{count} scores for {} labels", labels.len()),
        ));
    }
    if labels.back_count == 0 {
        log::warn!("batch has no background patches; the foreground weight is zero");
    }
    Ok(())
}

/// `−(1/M)·Σ [w·y·log p + (1 − y)·log(1 − p)]` with clamped logs.
pub fn weighted_bce<T: Real>(scores: &[T], labels: &PatchLabels) -> Result<T> {
    check_bce_inputs(scores.len(), labels)?;
    let w = T::lit(class_weight(labels));
    let mut acc = T::zero();
    for (&p, &y) in scores.iter().zip(&labels.labels) {
        acc = acc
            + if y == 1 {
                w * crate::ops::log_clamped(p)
            } else {
                crate::ops::log_clamped(T::one() - p)
            };
    }
    Ok(-acc / T::lit(labels.len() as f64))
}

/// Differentiable [`weighted_bce`] over a column of probabilities.
pub fn weighted_bce_graph<T: Real>(g: &Graph<T>, scores: Var, labels: &PatchLabels) -> Result<Var> {
    let count = g.value(scores).len();
    check_bce_inputs(count, labels)?;
    weighted_bce_part(g, scores, labels, class_weight(labels), labels.len())
}

/// One image's share of a batch loss whose weight `w` and patch count `M`
/// were computed over the whole batch; the shares of all images sum to the
/// batch [`weighted_bce_graph`].
pub fn weighted_bce_part<T: Real>(
    g: &Graph<T>,
    scores: Var,
    labels: &PatchLabels,
    weight: f64,
    batch_patches: usize,
) -> Result<Var> {
    if g.value(scores).len() != labels.len() {
        return Err(Error::shape(
            "weighted_bce",
            format!(
                "{} scores for {} labels",
                g.value(scores).len(),
                labels.len()
            ),
        ));
    }
    if batch_patches == 0 {
        return Err(Error::EmptyBatch);
    }
    let m = T::lit(batch_patches as f64);
    let w = T::lit(weight);
    let log_p = g.log_clamped(scores)?;
    let complement = g.affine(scores, -T::one(), T::one());
    let log_q = g.log_clamped(complement)?;
    let (mut fore, mut back) = (Vec::new(), Vec::new());
    for (i, &y) in labels.labels.iter().enumerate() {
        if y == 1 {
            fore.push((i, -w / m));
        } else {
            back.push((i, -T::one() / m));
        }
    }
    let a = g.pick_sum(log_p, fore)?;
    let b = g.pick_sum(log_q, back)?;
    g.add(a, b)
}

/// Shallow stack, per-token classifier and deep stack.
#[derive(Clone, Debug)]
pub struct Pruner {
    pub pre: SsmStack,
    pub classifier: Mlp,
    pub main: SsmStack,
}

pub struct PrunedTokens {
    /// Pre-backbone features, `T × D`.
    pub pre: Var,
    /// Foreground probabilities, `T × 1`.
    pub scores: Var,
    /// Reassembled sequence, `T × D`.
    pub tokens: Var,
    pub decision: PruneDecision,
}

impl Pruner {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        state: usize,
        pre_depth: usize,
        main_depth: usize,
        options: BlockOptions,
    ) -> Self {
        let mut init = init.sub(name);
        Self {
            pre: SsmStack::new(&mut init, "pre", pre_depth, dim, state, options),
            classifier: Mlp::new(&mut init, "classifier", &[dim, dim, 1]),
            main: SsmStack::new(&mut init, "main", main_depth, dim, state, options),
        }
    }

    pub fn classify<T: Real>(&self, g: &Graph<T>, p: &Bound, pre: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, p, pre)?;
        g.sigmoid(logits)
    }

    /// Runs the deep stack on the kept rows only, as one contiguous sequence,
    /// and writes the results back over the pre-backbone features.
    pub fn reassemble<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        pre: Var,
        decision: &PruneDecision,
    ) -> Result<Var> {
        let count = g.value(pre).dims2()?.0;
        if decision.kept.len() + decision.dropped.len() != count {
            return Err(Error::Integrity(format!(
                "decision covers {} tokens, sequence has {count}",
                decision.kept.len() + decision.dropped.len()
            )));
        }
        if decision.kept.is_empty() {
            return Ok(pre);
        }
        let gathered = g.gather_rows(pre, &decision.kept)?;
        let processed = self.main.run(g, p, gathered)?;
        g.scatter_rows(pre, processed, &decision.kept)
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        embedded: Var,
        ratio: f64,
    ) -> Result<PrunedTokens> {
        let pre = self.pre.run(g, p, embedded)?;
        let scores = self.classify(g, p, pre)?;
        let decision = select_topk(g.value(scores).data(), ratio)?;
        let tokens = self.reassemble(g, p, pre, &decision)?;
        Ok(PrunedTokens {
            pre,
            scores,
            tokens,
            decision,
        })
    }
}

/// Value-level reassembly of pre-backbone tokens under a decision.
pub fn prune_and_run<T: Real>(
    tokens: &Tensor<T>,
    decision: &PruneDecision,
    pruner: &Pruner,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let pre = g.constant(tokens.clone());
    let out = pruner.reassemble(&g, &p, pre, decision)?;
    let value = g.value(out).clone();
    Ok(value)
}

/// Writes `index,row,col,score,label,kept` per token.
pub fn write_prune_csv<W: Write>(
    mut out: W,
    grid: &PatchGrid,
    decision: &PruneDecision,
    labels: Option<&PatchLabels>,
) -> std::io::Result<()> {
    writeln!(out, "index,row,col,score,label,kept")?;
    let mut kept = vec![false; decision.scores.len()];
    for &k in &decision.kept {
        kept[k] = true;
    }
    for (i, (r, c)) in grid.positions().into_iter().enumerate() {
        let label = labels.map(|l| l.labels[i].to_string()).unwrap_or_default();
        writeln!(
            out,
            "{i},{r},{c},{:.6},{label},{}",
            decision.scores[i],
            u8::from(kept[i])
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_covering_one_patch() {
        let grid = PatchGrid::new(64, 64, 16).unwrap();
        let labels =
            generate_patch_labels(&grid, &[PixelBox::new(16.0, 32.0, 16.0, 16.0)]).unwrap();
        assert_eq!(labels.fore_count, 1);
        assert_eq!(labels.labels[2 * 4 + 1], 1);
    }

    #[test]
    fn no_boxes_all_background() {
        let grid = PatchGrid::new(40, 40, 8).unwrap();
        let labels = generate_patch_labels(&grid, &[]).unwrap();
        assert_eq!(labels.back_count, 25);
        assert_eq!(labels.fore_count, 0);
    }

    #[test]
    fn partial_overlap_counts() {
        let grid = PatchGrid::new(64, 64, 32).unwrap();
        let labels =
            generate_patch_labels(&grid, &[PixelBox::new(16.0, 16.0, 32.0, 32.0)]).unwrap();
        assert_eq!(labels.labels, vec![1, 1, 1, 1]);
        // touching edges only: no positive area
        let labels = generate_patch_labels(&grid, &[PixelBox::new(32.0, 0.0, 10.0, 32.0)]).unwrap();
        assert_eq!(labels.labels, vec![0, 1, 0, 0]);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let grid = PatchGrid::new(32, 32, 16).unwrap();
        let err = generate_patch_labels(&grid, &[PixelBox::new(1.0, 1.0, 0.0, 4.0)]).unwrap_err();
        assert!(matches!(err, Error::Annotation(_)));
    }

    #[test]
    fn topk_counts_and_ties() {
        let d = select_topk(&[0.1f64, 0.9, 0.3, 0.8, 0.2, 0.7, 0.6, 0.4], 0.5).unwrap();
        assert_eq!(d.kept, vec![1, 3, 5, 6]);
        assert_eq!(d.dropped, vec![0, 2, 4, 7]);
        let d = select_topk(&[0.5f64; 6], 0.5).unwrap();
        assert_eq!(d.kept, vec![0, 1, 2]);
        let d = select_topk(&[0.5f64; 6], 0.0).unwrap();
        assert_eq!(d.kept.len(), 6);
        assert!(matches!(select_topk(&[0.5f64], 1.0), Err(Error::Config(_))));
        assert!(matches!(
            select_topk(&[0.5f64], -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_arithmetic() {
        let mut l = vec![0u8; 90];
        l.extend([1u8; 10]);
        let labels = PatchLabels::from_labels(l);
        assert_eq!(class_weight(&labels), 90.0 / (10.0 + 1e-6));
    }

    #[test]
    fn saturated_predictions() {
        let labels = PatchLabels::from_labels(vec![1, 0, 0, 1, 0]);
        let scores: Vec<f64> = labels
            .labels
            .iter()
            .map(|&y| if y == 1 { 1.0 - 1e-7 } else { 1e-7 })
            .collect();
        assert!(weighted_bce(&scores, &labels).unwrap() < 1e-5);
    }

    #[test]
    fn empty_batch() {
        let labels = PatchLabels::from_labels(vec![]);
        assert!(matches!(
            weighted_bce::<f64>(&[], &labels),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn graph_matches_plain() {
        let labels = PatchLabels::from_labels(vec![1, 0, 0, 1, 0, 0]);
        let scores = [0.7f64, 0.2, 0.4, 0.1, 0.9, 0.05];
        let g = Graph::new();
        let s = g.constant(Tensor::new(vec![6, 1], scores.to_vec()).unwrap());
        let l = weighted_bce_graph(&g, s, &labels).unwrap();
        let plain = weighted_bce(&scores, &labels).unwrap();
        assert!((g.scalar(l) - plain).abs() < 1e-12);
    }

    #[test]
    fn csv_dump() {
        let grid = PatchGrid::new(4, 8, 4).unwrap();
        let d = select_topk(&[0.2f64, 0.8], 0.5).unwrap();
        let mut buf = Vec::new();
        write_prune_csv(&mut buf, &grid, &d, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,0,1,0.800000,,1");
    }
}
