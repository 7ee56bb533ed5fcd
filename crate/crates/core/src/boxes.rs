//! Axis-aligned box geometry: IoU, generalized IoU and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Box in image pixels: top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl PixelBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Annotation(format!(
                "box at ({}, {}) has non-positive size {}x{}",
                self.x, self.y, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.width, self.y + self.height]
    }

    /// Normalised `(cx, cy, w, h)` relative to an image of the given size.
    pub fn normalized(&self, image_width: usize, image_height: usize) -> [f64; 4] {
        let (w, h) = (image_width as f64, image_height as f64);
        [
            (self.x + 0.5 * self.width) / w,
            (self.y + 0.5 * self.height) / h,
            self.width / w,
            self.height / h,
        ]
    }

    pub fn from_normalized(b: [f64; 4], image_width: usize, image_height: usize) -> Self {
        let (w, h) = (image_width as f64, image_height as f64);
        Self {
            x: (b[0] - 0.5 * b[2]) * w,
            y: (b[1] - 0.5 * b[3]) * h,
            width: b[2] * w,
            height: b[3] * h,
        }
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        iou_corners(self.corners(), other.corners())
    }
}

/// `(cx, cy, w, h)` to `(x1, y1, x2, y2)`.
pub fn cxcywh_to_corners<T: Real>(b: [T; 4]) -> [T; 4] {
    let half = T::lit(0.5);
    [
        b[0] - half * b[2],
        b[1] - half * b[3],
        b[0] + half * b[2],
        b[1] + half * b[3],
    ]
}

pub fn corners_to_cxcywh<T: Real>(c: [T; 4]) -> [T; 4] {
    let half = T::lit(0.5);
    [
        half * (c[0] + c[2]),
        half * (c[1] + c[3]),
        c[2] - c[0],
        c[3] - c[1],
    ]
}

/// IoU of two corner-form boxes; zero when either has no area.
pub fn iou_corners<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(T::zero());
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(T::zero());
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes, with the gradient of the
/// result with respect to the first box.
pub fn giou_with_grad<T: Real>(pred: [T; 4], target: [T; 4]) -> (T, [T; 4]) {
    let zero = T::zero();
    let one = T::one();
    let [x1, y1, x2, y2] = cxcywh_to_corners(pred);
    let [tx1, ty1, tx2, ty2] = cxcywh_to_corners(target);

    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_t = (tx2 - tx1) * (ty2 - ty1);

    let raw_iw = x2.min(tx2) - x1.max(tx1);
    let raw_ih = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (raw_iw.max(zero), raw_ih.max(zero));
    let inter = iw * ih;
    let union = area_p + area_t - inter;

    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;

    let iou = inter / union;
    let giou = iou - (hull - union) / hull;

    // d/d(x1, y1, x2, y2) of each intermediate.
    let d_area_p = [-ph, -pw, ph, pw];
    let mut d_iw = [zero; 4];
    let mut d_ih = [zero; 4];
    if raw_iw > zero {
        if x2 < tx2 {
            d_iw[2] = one;
        }
        if x1 > tx1 {
            d_iw[0] = -one;
        }
    }
    if raw_ih > zero {
        if y2 < ty2 {
            d_ih[3] = one;
        }
        if y1 > ty1 {
            d_ih[1] = -one;
        }
    }
    let mut d_cw = [zero; 4];
    let mut d_ch = [zero; 4];
    if x2 > tx2 {
        d_cw[2] = one;
    }
    if x1 < tx1 {
        d_cw[0] = -one;
    }
    if y2 > ty2 {
        d_ch[3] = one;
    }
    if y1 < ty1 {
        d_ch[1] = -one;
    }

    let mut d_corners = [zero; 4];
    for k in 0..4 {
        let d_inter = ih * d_iw[k] + iw * d_ih[k];
        let d_union = d_area_p[k] - d_inter;
        let d_hull = ch * d_cw[k] + cw * d_ch[k];
        let d_iou = d_inter / union - inter * d_union / (union * union);
        // giou = iou - 1 + union / hull
        let d_ratio = d_union / hull - union * d_hull / (hull * hull);
        d_corners[k] = d_iou + d_ratio;
    }
    let half = T::lit(0.5);
    let grad = [
        d_corners[0] + d_corners[2],
        d_corners[1] + d_corners[3],
        half * (d_corners[2] - d_corners[0]),
        half * (d_corners[3] - d_corners[1]),
    ];
    (giou, grad)
}

pub fn giou<T: Real>(pred: [T; 4], target: [T; 4]) -> T {
    giou_with_grad(pred, target).0
}
