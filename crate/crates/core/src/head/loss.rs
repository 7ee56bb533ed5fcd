//! Matching cost, box loss and the set-prediction loss.

use crate::autodiff::{BoxTarget, Graph, Var};
use crate::boxes::giou;
use crate::error::{Error, Result};
use crate::head::hungarian::MatchResult;
use crate::ops::{log_clamped, softmax_rows};
use crate::tensor::{Real, Tensor};

/// Loss weights: `λ₁` (L1), `λ₂` (GIoU) and `λ_∅` (no-object).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// A labelled box, normalised `(cx, cy, w, h)`; `class` is never the
/// no-object index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: [f64; 4],
}

/// Per-query outputs: `M_q × (C+1)` logits (last column is no-object) and
/// `M_q × 4` boxes in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet<T: Real> {
    pub class_logits: Tensor<T>,
    pub boxes: Tensor<T>,
}

impl<T: Real> DetectionSet<T> {
    pub fn queries(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.shape()[1] - 1
    }

    pub fn probabilities(&self) -> Result<Tensor<T>> {
        softmax_rows(&self.class_logits)
    }

    pub fn box_at(&self, q: usize) -> [T; 4] {
        let r = self.boxes.row(q);
        [r[0], r[1], r[2], r[3]]
    }
}

fn check_box<T: Real>(b: &[T; 4], what: &str) -> Result<()> {
    if !(b[2] > T::zero() && b[3] > T::zero()) {
        return Err(Error::Annotation(format!(
            "{what} box has non-positive size {b:?}"
        )));
    }
    Ok(())
}

/// `λ₁‖b − b̂‖₁ + λ₂(1 − GIoU(b, b̂))`.
pub fn box_loss<T: Real>(b: [T; 4], b_hat: [T; 4], weights: &LossWeights) -> Result<T> {
    check_box(&b, "ground-truth")?;
    check_box(&b_hat, "predicted")?;
    let l1: T = (0..4).map(|k| (b[k] - b_hat[k]).abs()).sum();
    Ok(T::lit(weights.l1) * l1 + T::lit(weights.giou) * (T::one() - giou(b_hat, b)))
}

/// `−p̂(c) + L_box` for one prediction, from its softmax row.
pub fn match_cost<T: Real>(
    gt: &GroundTruth,
    probs: &[T],
    b_hat: [T; 4],
    weights: &LossWeights,
) -> Result<T> {
    let b = gt.bbox.map(T::lit);
    Ok(-probs[gt.class] + box_loss(b, b_hat, weights)?)
}

/// `N × M_q` matching costs.
pub fn cost_matrix<T: Real>(
    gts: &[GroundTruth],
    pred: &DetectionSet<T>,
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    if gts.is_empty() {
        return Err(Error::shape("cost_matrix", "no ground truths"));
    }
    let probs = pred.probabilities()?;
    let m = pred.queries();
    let mut data = Vec::with_capacity(gts.len() * m);
    for gt in gts {
        if gt.class >= pred.num_classes() {
            return Err(Error::Annotation(format!(
                "class {} outside the {} model classes",
                gt.class,
                pred.num_classes()
            )));
        }
        for q in 0..m {
            data.push(match_cost(gt, probs.row(q), pred.box_at(q), weights)?);
        }
    }
    Tensor::new(vec![gts.len(), m], data)
}

/// Matched queries pay `−log p̂(c) + L_box`; the rest pay `−λ_∅ log p̂(∅)`.
pub fn hungarian_loss<T: Real>(
    gts: &[GroundTruth],
    pred: &DetectionSet<T>,
    matching: &MatchResult,
    weights: &LossWeights,
) -> Result<T> {
    let probs = pred.probabilities()?;
    let empty = pred.num_classes();
    let owners = matching.by_query(pred.queries());
    let mut total = T::zero();
    for (q, owner) in owners.iter().enumerate() {
        let p = probs.row(q);
        total = total
            + match owner {
                Some(i) => {
                    let gt = &gts[*i];
                    -log_clamped(p[gt.class])
                        + box_loss(gt.bbox.map(T::lit), pred.box_at(q), weights)?
                }
                None => -T::lit(weights.no_object) * log_clamped(p[empty]),
            };
    }
    Ok(total)
}

/// Differentiable [`hungarian_loss`] over logits and boxes on the tape.
pub fn hungarian_loss_graph<T: Real>(
    g: &Graph<T>,
    logits: Var,
    boxes: Var,
    gts: &[GroundTruth],
    matching: &MatchResult,
    weights: &LossWeights,
) -> Result<Var> {
    let (queries, width) = g.value(logits).dims2()?;
    let empty = width - 1;
    let probs = g.softmax_rows(logits)?;
    let log_p = g.log_clamped(probs)?;
    let owners = matching.by_query(queries);
    let mut entries = Vec::with_capacity(queries);
    let mut targets = Vec::with_capacity(gts.len());
    for (q, owner) in owners.iter().enumerate() {
        match owner {
            Some(i) => {
                let gt = &gts[*i];
                check_box(&gt.bbox, "ground-truth")?;
                entries.push((q * width + gt.class, -T::one()));
                targets.push(BoxTarget {
                    row: q,
                    target: gt.bbox.map(T::lit),
                });
            }
            None => entries.push((q * width + empty, -T::lit(weights.no_object))),
        }
    }
    let class_term = g.pick_sum(log_p, entries)?;
    if targets.is_empty() {
        return Ok(class_term);
    }
    let box_term = g.box_loss(boxes, targets, T::lit(weights.l1), T::lit(weights.giou))?;
    g.add(class_term, box_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::hungarian::hungarian_match;

    #[test]
    fn identical_boxes_cost_nothing() {
        let b = [0.3f64, 0.4, 0.2, 0.1];
        assert_eq!(box_loss(b, b, &LossWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn wider_prediction() {
        let b = [0.5f64, 0.5, 0.2, 0.2];
        let wide = [0.5, 0.5, 0.4, 0.2];
        let l = box_loss(b, wide, &LossWeights::default()).unwrap();
        // L1 = 0.2, GIoU = 0.5
        assert!((l - (5.0 * 0.2 + 2.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_box() {
        let err = box_loss(
            [0.5, 0.5, 0.0, 0.2],
            [0.5, 0.5, 0.1, 0.1],
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Annotation(_)));
    }

    #[test]
    fn cost_extremes() {
        let w = LossWeights::default();
        let gt = GroundTruth {
            class: 1,
            bbox: [0.5, 0.5, 0.2, 0.2],
        };
        assert_eq!(
            match_cost(&gt, &[0.0, 1.0, 0.0], gt.bbox, &w).unwrap(),
            -1.0
        );
        assert_eq!(match_cost(&gt, &[1.0, 0.0, 0.0], gt.bbox, &w).unwrap(), 0.0);
    }

    #[test]
    fn saturated_loss_is_tiny() {
        let w = LossWeights::default();
        let gts = [GroundTruth {
            class: 0,
            bbox: [0.3, 0.3, 0.2, 0.2],
        }];
        let big = 40.0;
        let pred = DetectionSet {
            class_logits: Tensor::from_rows(&[
                vec![big, 0.0, 0.0],
                vec![0.0, 0.0, big],
                vec![0.0, 0.0, big],
            ])
            .unwrap(),
            boxes: Tensor::from_rows(&[vec![0.3, 0.3, 0.2, 0.2], vec![0.5; 4], vec![0.5; 4]])
                .unwrap(),
        };
        let cost = cost_matrix(&gts, &pred, &w).unwrap();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.assignment, vec![0]);
        assert!(hungarian_loss(&gts, &pred, &m, &w).unwrap() < 1e-5);
    }

    #[test]
    fn no_ground_truth_only_empty_term() {
        let w = LossWeights::default();
        let pred = DetectionSet {
            class_logits: Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(),
            boxes: Tensor::full(&[2, 4], 0.5),
        };
        let m = MatchResult {
            assignment: vec![],
            total_cost: 0.0,
        };
        let l = hungarian_loss(&[], &pred, &m, &w).unwrap();
        let p1 = 1.0 / (1.0 + 1f64.exp());
        let expected = -0.1 * (0.5f64.ln() + p1.ln());
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_plain() {
        let w = LossWeights::default();
        let gts = [
            GroundTruth {
                class: 0,
                bbox: [0.3, 0.3, 0.2, 0.2],
            },
            GroundTruth {
                class: 1,
                bbox: [0.7, 0.6, 0.1, 0.3],
            },
        ];
        let pred = DetectionSet {
            class_logits: Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).sin()),
            boxes: Tensor::from_fn(&[4, 4], |i| {
                0.2 + 0.5 * ((i as f64 * 1.3).cos() * 0.5 + 0.5)
            }),
        };
        let m = hungarian_match(&cost_matrix(&gts, &pred, &w).unwrap()).unwrap();
        let plain = hungarian_loss(&gts, &pred, &m, &w).unwrap();
        let g = Graph::new();
        let l = g.constant(pred.class_logits.clone());
        let b = g.constant(pred.boxes.clone());
        let v = hungarian_loss_graph(&g, l, b, &gts, &m, &w).unwrap();
        assert!((g.scalar(v) - plain).abs() < 1e-12);
    }
}
