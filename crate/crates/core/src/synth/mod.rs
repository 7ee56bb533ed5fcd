//! Deterministic synthetic maritime scenes with exact box annotations.

pub mod coco;
pub mod png;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::PixelBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use coco::{coco_read, coco_write, CocoImage};
pub use png::{load_png, save_png, to_png_bytes};

pub const CLASS_NAMES: [&str; 3] = ["buoy", "small_vessel", "large_vessel"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const BUOY: usize = 0;
pub const SMALL_VESSEL: usize = 1;
pub const LARGE_VESSEL: usize = 2;

/// Attempts per object before generation gives up.
const PLACEMENT_TRIES: usize = 400;
const MIN_SIDE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    pub const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Inclusive pixel-area range generated for this band.
    fn area_range(self) -> (usize, usize) {
        match self {
            SizeBand::Small => (144, 1023),
            SizeBand::Medium => (1024, 9216),
            SizeBand::Large => (9217, 16384),
        }
    }
}

/// `< 32²` small, `32²..=96²` medium, `> 96²` large.
pub fn size_band(b: &PixelBox) -> SizeBand {
    let area = b.area();
    if area < 1024.0 {
        SizeBand::Small
    } else if area <= 9216.0 {
        SizeBand::Medium
    } else {
        SizeBand::Large
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub boxes: Vec<PixelBox>,
    pub class_ids: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl SceneAnnotation {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            boxes: Vec::new(),
            class_ids: Vec::new(),
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of objects per scene.
    pub object_count: (usize, usize),
    /// Horizon row as a fraction of the height.
    pub horizon_fraction: f64,
    /// Relative frequency of small, medium and large objects.
    pub size_weights: [f64; 3],
    /// Amplitude of the wave texture on the water.
    pub clutter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 256,
            width: 256,
            object_count: (1, 4),
            horizon_fraction: 0.35,
            size_weights: [0.3, 0.45, 0.25],
            clutter: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene {}x{} is too small",
                self.height, self.width
            )));
        }
        if self.object_count.0 > self.object_count.1 {
            return Err(Error::Config(format!(
                "object count range {:?} is empty",
                self.object_count
            )));
        }
        if !(0.05..=0.9).contains(&self.horizon_fraction) {
            return Err(Error::Config(format!(
                "horizon fraction {} outside [0.05, 0.9]",
                self.horizon_fraction
            )));
        }
        if self.size_weights.iter().any(|w| !(*w >= 0.0))
            || self.size_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!(
                "invalid size weights {:?}",
                self.size_weights
            )));
        }
        if !(0.0..=0.5).contains(&self.clutter) {
            return Err(Error::Config(format!(
                "clutter {} outside [0, 0.5]",
                self.clutter
            )));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        (self.horizon_fraction * self.height as f64).round() as usize
    }
}

/// Binary silhouette of one object, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Silhouette {
    pub width: usize,
    pub height: usize,
    /// Per-pixel paint layer: 0 empty, 1 hull/body, 2 superstructure/stripe, 3 detail.
    pub layers: Vec<u8>,
}

impl Silhouette {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            layers: vec![0; width * height],
        }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, layer: u8) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.layers[y * self.width + x] = layer;
            }
        }
    }

    /// Tight pixel bounds `(x0, y0, x1, y1)` (exclusive ends) of painted pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.layers[y * self.width + x] != 0 {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x + 1), e.max(y + 1)),
                    });
                }
            }
        }
        b
    }
}

/// Shape parameters drawn once per object; rasterisation is a pure function
/// of these.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of the height taken by the hull (vessels).
    pub hull_fraction: f64,
    /// Bow/stern taper of the hull bottom, in pixels per side.
    pub taper: usize,
    /// Superstructure horizontal extent as fractions of the width.
    pub cabin: (f64, f64),
    pub palette: [[f32; 3]; 3],
}

pub fn rasterize(spec: &ObjectSpec) -> Silhouette {
    let (w, h) = (spec.width, spec.height);
    let mut s = Silhouette::new(w, h);
    if spec.class == BUOY {
        let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - rx) / rx;
                let dy = (y as f64 + 0.5 - ry) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    let band = y * 3 / h;
                    s.layers[y * w + x] = if band == 1 { 2 } else { 1 };
                }
            }
        }
        // Keep the disk touching all four edges.
        s.fill_rect(w / 2, 0, w / 2 + 1, h, 1);
        s.fill_rect(0, h / 2, w, h / 2 + 1, 1);
        return s;
    }
    let hull_top = ((1.0 - spec.hull_fraction) * h as f64)
        .round()
        .clamp(1.0, (h - 1) as f64) as usize;
    let hull_rows = h - hull_top;
    for y in hull_top..h {
        // Hull narrows linearly towards the keel.
        let depth = (y - hull_top) as f64 / hull_rows.max(1) as f64;
        let inset = (spec.taper as f64 * depth).round() as usize;
        let inset = inset.min(w / 2 - 1);
        s.fill_rect(inset, y, w - inset, y + 1, 1);
    }
    let cx0 = ((spec.cabin.0 * w as f64) as usize).min(w - 2);
    let cx1 = ((spec.cabin.1 * w as f64) as usize).clamp(cx0 + 1, w);
    s.fill_rect(cx0, 0, cx1, hull_top, 2);
    if spec.class == LARGE_VESSEL && hull_top >= 3 {
        // Deck cargo between the cabin and the bow.
        let cargo_top = hull_top - hull_top / 2;
        let start = (cx1 + 2).min(w);
        let end = w.saturating_sub(spec.taper + 2).max(start);
        s.fill_rect(start, cargo_top, end, hull_top, 3);
    }
    s
}

fn sample_spec(
    rng: &mut ChaCha8Rng,
    band: SizeBand,
    max_w: usize,
    max_h: usize,
) -> Option<ObjectSpec> {
    let (lo, hi) = band.area_range();
    let area = rng.gen_range(lo..=hi) as f64;
    let class = match band {
        SizeBand::Small => {
            if rng.gen_bool(0.6) {
                BUOY
            } else {
                SMALL_VESSEL
            }
        }
        SizeBand::Medium => {
            if rng.gen_bool(0.6) {
                SMALL_VESSEL
            } else {
                LARGE_VESSEL
            }
        }
        SizeBand::Large => LARGE_VESSEL,
    };
    let aspect = match class {
        BUOY => rng.gen_range(0.7..1.0),
        SMALL_VESSEL => rng.gen_range(1.8..3.0),
        _ => rng.gen_range(2.2..3.5),
    };
    let width = (area * aspect).sqrt().round() as usize;
    let height = (area / width.max(1) as f64).round() as usize;
    if width < MIN_SIDE || height < MIN_SIDE || width > max_w || height > max_h {
        return None;
    }
    let palette = match class {
        BUOY => {
            let body =
                [[0.95, 0.35, 0.1], [0.95, 0.8, 0.1], [0.85, 0.15, 0.15]][rng.gen_range(0..3)];
            [body, [0.95, 0.95, 0.95], body]
        }
        SMALL_VESSEL => [
            [
                rng.gen_range(0.75..0.95),
                rng.gen_range(0.75..0.95),
                rng.gen_range(0.75..0.95),
            ],
            [0.2, 0.25, 0.3],
            [0.3, 0.3, 0.3],
        ],
        _ => [
            [
                rng.gen_range(0.1..0.25),
                rng.gen_range(0.1..0.2),
                rng.gen_range(0.1..0.3),
            ],
            [0.92, 0.92, 0.9],
            [
                rng.gen_range(0.5..0.9),
                rng.gen_range(0.2..0.5),
                rng.gen_range(0.1..0.3),
            ],
        ],
    };
    let cabin_width = if class == LARGE_VESSEL { 0.25 } else { 0.4 };
    let cabin_start = rng.gen_range(0.1..(0.9 - cabin_width));
    Some(ObjectSpec {
        class,
        width,
        height,
        hull_fraction: if class == BUOY {
            1.0
        } else {
            rng.gen_range(0.4..0.6)
        },
        taper: (height as f64 * rng.gen_range(0.2..0.5)) as usize,
        cabin: (cabin_start, cabin_start + cabin_width),
        palette,
    })
}

fn overlaps_with_gap(a: &PixelBox, b: &PixelBox, gap: f64) -> bool {
    a.x < b.x + b.width + gap
        && b.x < a.x + a.width + gap
        && a.y < b.y + b.height + gap
        && b.y < a.y + a.height + gap
}

fn paint_background(cfg: &SceneConfig, rng: &mut ChaCha8Rng, img: &mut [f32]) {
    let (h, w) = (cfg.height, cfg.width);
    let horizon = cfg.horizon();
    let sky_top = [
        rng.gen_range(0.3..0.5),
        rng.gen_range(0.5..0.7),
        rng.gen_range(0.8..0.95),
    ];
    let sky_low = [
        rng.gen_range(0.75..0.85),
        rng.gen_range(0.82..0.9),
        rng.gen_range(0.9..0.97),
    ];
    let sea = [
        rng.gen_range(0.05..0.15),
        rng.gen_range(0.25..0.35),
        rng.gen_range(0.35..0.5),
    ];
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.gen_range(0.15..0.3);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = if y < horizon {
                let t = y as f32 / horizon.max(1) as f32;
                [0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_low[c] * t)
            } else {
                let depth = (y - horizon) as f64 / (h - horizon).max(1) as f64;
                let wave = (x as f64 * freq / (1.0 + 2.0 * (1.0 - depth)) + phase + y as f64 * 0.7)
                    .sin()
                    * (y as f64 * 0.31 + phase).cos();
                let noise: f64 = rng.gen_range(-1.0..1.0);
                let v = (cfg.clutter * (0.7 * wave + 0.3 * noise)) as f32;
                let shade = 1.0 - 0.35 * depth as f32;
                [0, 1, 2].map(|c| sea[c] * shade + v)
            };
            for c in 0..3 {
                img[c * plane + i] = px[c].clamp(0.0, 1.0);
            }
        }
    }
}

fn paint_object(
    cfg: &SceneConfig,
    spec: &ObjectSpec,
    sil: &Silhouette,
    x0: usize,
    y0: usize,
    img: &mut [f32],
) {
    let plane = cfg.height * cfg.width;
    for y in 0..sil.height {
        for x in 0..sil.width {
            let layer = sil.layers[y * sil.width + x];
            if layer == 0 {
                continue;
            }
            let color = spec.palette[layer as usize - 1];
            let i = (y0 + y) * cfg.width + x0 + x;
            for c in 0..3 {
                img[c * plane + i] = color[c];
            }
        }
    }
}

/// Renders a scene. Identical configs give bitwise-identical outputs.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(Tensor<f32>, SceneAnnotation)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0f32; 3 * h * w];
    paint_background(cfg, &mut rng, &mut img);

    let horizon = cfg.horizon();
    let count = rng.gen_range(cfg.object_count.0..=cfg.object_count.1);
    let bands = WeightedIndex::new(cfg.size_weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut ann = SceneAnnotation::empty(h, w);
    let mut placed: Vec<(ObjectSpec, Silhouette, usize, usize)> = Vec::with_capacity(count);
    let mut drawn: Vec<SizeBand> = (0..count)
        .map(|_| SizeBand::ALL[bands.sample(&mut rng)])
        .collect();
    // Largest first, so crowding rarely forces a fallback.
    drawn.sort_by_key(|b| std::cmp::Reverse(b.index()));
    for (k, &drawn) in drawn.iter().enumerate() {
        let mut done = false;
        // Crowded scenes fall back to smaller bands.
        for band in SizeBand::ALL[..=drawn.index()].iter().rev().copied() {
            if done {
                break;
            }
            for _ in 0..PLACEMENT_TRIES {
                let Some(spec) = sample_spec(&mut rng, band, w - 2, h - horizon) else {
                    continue;
                };
                let sil = rasterize(&spec);
                let Some((bx0, by0, bx1, by1)) = sil.bounds() else {
                    continue;
                };
                let (bw, bh) = (bx1 - bx0, by1 - by0);
                if size_band(&PixelBox::new(0.0, 0.0, bw as f64, bh as f64)) != band {
                    continue;
                }
                // Bottom edge sits on or below the horizon.
                let bottom_lo = (horizon + 2).max(bh);
                if bottom_lo > h {
                    continue;
                }
                let bottom = rng.gen_range(bottom_lo..=h);
                let x = rng.gen_range(1..=(w - 1 - spec.width));
                let y = bottom - bh - by0;
                let bbox = PixelBox::new((x + bx0) as f64, (y + by0) as f64, bw as f64, bh as f64);
                if ann.boxes.iter().any(|b| overlaps_with_gap(b, &bbox, 2.0)) {
                    continue;
                }
                ann.boxes.push(bbox);
                ann.class_ids.push(spec.class);
                placed.push((spec, sil, x, y));
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Generation(format!(
                "could not place object {} of {count} ({} band) in a {h}x{w} scene after {PLACEMENT_TRIES} tries",
                k + 1,
                drawn.name()
            )));
        }
    }
    for (spec, sil, x, y) in &placed {
        paint_object(cfg, spec, sil, *x, *y, &mut img);
    }
    Ok((Tensor::from_parts(vec![3, h, w], img), ann))
}
