//! Closed-form multiply-accumulate counts per pipeline component.
//!
//! Counts cover matrix products, convolutions and the scan recurrence;
//! normalisation, activations and additions are not counted. Blocks are
//! counted in the selective mode.

use crate::config::ModelConfig;
use crate::fpn::halve;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpnVariant {
    /// Single-scale pyramid built with a stride-2 transposed convolution, a
    /// strided 3×3 convolution chain and 1×1 + 3×3 convolutions per level.
    Simple,
    /// Depthwise stride-2 downsampling, pointwise mixing and one SSM block per level.
    Efficient,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Component {
    Tokenizer,
    PreBackbone,
    Classifier,
    MainBackbone { ratio: f64 },
    Fpn(FpnVariant),
    Head,
}

fn grid(cfg: &ModelConfig) -> (usize, usize) {
    (
        cfg.image_height.div_ceil(cfg.patch),
        cfg.image_width.div_ceil(cfg.patch),
    )
}

pub fn tokens(cfg: &ModelConfig) -> usize {
    let (r, c) = grid(cfg);
    r * c
}

/// Token counts of the efficient pyramid levels, finest first.
pub fn level_tokens(cfg: &ModelConfig) -> Vec<usize> {
    let (mut r, mut c) = grid(cfg);
    let mut out = vec![r * c];
    for _ in 1..cfg.fpn_levels {
        r = halve(r);
        c = halve(c);
        out.push(r * c);
    }
    out
}

/// One bidirectional block per token: per direction the Δ, B and C
/// projections, the state update and readout, and the skip; then the two
/// fusion maps.
pub fn block_per_token(dim: usize, state: usize) -> f64 {
    let (d, n) = (dim as f64, state as f64);
    let direction = d * d + 2.0 * d * n + 3.0 * d * n + d;
    2.0 * direction + 2.0 * d * d
}

fn simple_fpn(cfg: &ModelConfig, t: f64) -> f64 {
    let d2 = (cfg.dim * cfg.dim) as f64;
    // Finest level at twice the token resolution, then T, T/4, ...
    let mut levels = vec![4.0 * t];
    for l in 1..cfg.fpn_levels {
        levels.push(t / 4f64.powi(l as i32 - 1));
    }
    let up = 4.0 * t * d2;
    let down: f64 = levels.iter().skip(2).map(|tl| 9.0 * tl * d2).sum();
    let per_level: f64 = levels.iter().map(|tl| 10.0 * tl * d2).sum();
    up + down + per_level
}

fn efficient_fpn(cfg: &ModelConfig) -> f64 {
    let d = cfg.dim as f64;
    let block = block_per_token(cfg.dim, cfg.state);
    level_tokens(cfg)
        .iter()
        .enumerate()
        .map(|(l, &tl)| {
            let tl = tl as f64;
            let down = if l == 0 {
                0.0
            } else {
                9.0 * d * tl + d * d * tl
            };
            down + block * tl
        })
        .sum()
}

fn head(cfg: &ModelConfig) -> f64 {
    let d = cfg.dim as f64;
    let q = cfg.queries as f64;
    let m: f64 = level_tokens(cfg).iter().sum::<usize>() as f64;
    let layer = 2.0 * q * d * d + 2.0 * m * d * d + 2.0 * q * m * d + 4.0 * q * d * d;
    let outputs = q * d * (cfg.classes + 1) as f64 + q * (2.0 * d * d + 4.0 * d);
    cfg.decoder_layers as f64 * layer + outputs
}

pub fn count_flops(component: Component, cfg: &ModelConfig) -> f64 {
    let t = tokens(cfg) as f64;
    let d = cfg.dim as f64;
    let block = block_per_token(cfg.dim, cfg.state);
    match component {
        Component::Tokenizer => t * (3 * cfg.patch * cfg.patch) as f64 * d,
        Component::PreBackbone => cfg.pre_depth as f64 * t * block,
        Component::Classifier => t * (d * d + d),
        Component::MainBackbone { ratio } => cfg.main_depth as f64 * (1.0 - ratio) * t * block,
        Component::Fpn(FpnVariant::Simple) => simple_fpn(cfg, t),
        Component::Fpn(FpnVariant::Efficient) => efficient_fpn(cfg),
        Component::Head => head(cfg),
    }
}

/// Whole-pipeline count at the configured pruning ratio.
pub fn total_flops(cfg: &ModelConfig, fpn: FpnVariant) -> f64 {
    [
        Component::Tokenizer,
        Component::PreBackbone,
        Component::Classifier,
        Component::MainBackbone {
            ratio: cfg.prune_ratio,
        },
        Component::Fpn(fpn),
        Component::Head,
    ]
    .iter()
    .map(|&c| count_flops(c, cfg))
    .sum()
}
