//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use mdet_core::boxes::PixelBox;

/// Every injective row→column map, lexicographically first among the
/// cheapest. Costs are summed in row order.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    fn go(
        cost: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if row == cost.len() {
            let total = cur
                .iter()
                .enumerate()
                .fold(0.0, |acc, (i, &j)| acc + cost[i][j]);
            if best.as_ref().is_none_or(|b| total < b.1) {
                *best = Some((cur.clone(), total));
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(cost, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let m = cost.first().map_or(0, Vec::len);
    let mut best = None;
    go(cost, 0, &mut vec![false; m], &mut Vec::new(), &mut best);
    best.unwrap_or((Vec::new(), 0.0))
}

/// Per-pixel foreground mask: a pixel is covered when a box overlaps its
/// unit square with positive area.
pub fn raster_mask(height: usize, width: usize, boxes: &[PixelBox]) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            mask[y * width + x] = boxes.iter().any(|b| {
                b.x < px + 1.0 && b.x + b.width > px && b.y < py + 1.0 && b.y + b.height > py
            });
        }
    }
    mask
}

/// Patch labels read off the pixel mask, row-major over the padded grid.
pub fn raster_patch_labels(
    height: usize,
    width: usize,
    patch: usize,
    boxes: &[PixelBox],
) -> Vec<u8> {
    let mask = raster_mask(height, width, boxes);
    let (rows, cols) = (height.div_ceil(patch), width.div_ceil(patch));
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut hit = false;
            for y in r * patch..((r + 1) * patch).min(height) {
                for x in c * patch..((c + 1) * patch).min(width) {
                    hit |= mask[y * width + x];
                }
            }
            out.push(u8::from(hit));
        }
    }
    out
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x + a.width).min(b.x + b.width) - a.x.max(b.x);
    let ih = (a.y + a.height).min(b.y + b.height) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.width * a.height + b.width * b.height - inter)
}

/// Detections in score order each claim the best still-free ground truth
/// above the threshold; lowest index wins ties. Written as a scan over an
/// explicit availability table.
pub fn sequential_match(dets: &[PixelBox], gts: &[PixelBox], threshold: f64) -> Vec<Option<usize>> {
    let mut free = vec![true; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let v = iou(d, g);
                if free[j] && v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                free[j] = false;
            }
            best.map(|b| b.0)
        })
        .collect()
}

/// `−(1/M)·Σ [w·y·ln p + (1 − y)·ln(1 − p)]`, logs floored at 1e-7.
pub fn bce_oracle(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let fore = labels.iter().filter(|&&l| l == 1).count() as f64;
    let back = labels.len() as f64 - fore;
    let w = back / (fore + 1e-6);
    let ln = |x: f64| x.max(1e-7).ln();
    let mut sum = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        sum += if y == 1 { w * ln(p) } else { ln(1.0 - p) };
    }
    (w, -sum / labels.len() as f64)
}
