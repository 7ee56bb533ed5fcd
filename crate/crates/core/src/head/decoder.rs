//! Query decoder: learned queries cross-attend to the flattened pyramid.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fpn::LevelOutput;
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{positional_encoding_at, PatchGrid};

use super::loss::DetectionSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub dim: usize,
    pub queries: usize,
    pub classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub levels: usize,
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        let mut init = init.sub(name);
        Self {
            q: Linear::new(&mut init, "q", dim, dim, true),
            k: Linear::new(&mut init, "k", dim, dim, true),
            v: Linear::new(&mut init, "v", dim, dim, true),
            out: Linear::new(&mut init, "out", dim, dim, true),
            heads,
        }
    }

    /// Multi-head `softmax(QKᵀ/√d)V` with queries `M × D`, keys and values
    /// `T × D`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, key)?;
        let v = self.v.forward(g, p, value)?;
        let dim = g.value(q).dims2()?.1;
        let width = dim / self.heads;
        let scale = T::lit(1.0 / (width as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * width, (h + 1) * width);
            let qh = g.slice_cols(q, s, e)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.out.forward(g, p, merged)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub attention: CrossAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl DecoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        let mut init = init.sub(name);
        Self {
            attention: CrossAttention::new(&mut init, "attn", dim, heads),
            norm1: LayerNorm::new(&mut init, "norm1", dim),
            ffn: Mlp::new(&mut init, "ffn", &[dim, 2 * dim, dim]),
            norm2: LayerNorm::new(&mut init, "norm2", dim),
        }
    }

    /// `x ← LN(x + Attn(x + q_pos, mem + pos, mem))`, then `x ← LN(x + FFN(x))`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
    ) -> Result<Var> {
        let q = g.add(x, query_pos)?;
        let k = g.add(memory, memory_pos)?;
        let a = self.attention.forward(g, p, q, k, memory)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub config: HeadConfig,
    /// Initial query content, `M_q × D`.
    pub queries: ParamId,
    /// Query positional embedding, `M_q × D`.
    pub query_pos: ParamId,
    /// One learned `D` vector per pyramid level.
    pub level_embed: Vec<ParamId>,
    pub layers: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub box_head: Mlp,
}

/// Positional codes for a level, placed at the centre of each cell in
/// level-0 grid units so all levels share one coordinate frame.
pub fn level_positions<T: Real>(grid: &PatchGrid, stride: usize, dim: usize) -> Result<Tensor<T>> {
    let offset = (stride as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(grid.tokens() * dim);
    for (r, c) in grid.positions() {
        let pe = positional_encoding_at::<T>(
            (r * stride) as f64 + offset,
            (c * stride) as f64 + offset,
            dim,
        )?;
        data.extend_from_slice(pe.data());
    }
    Tensor::new(vec![grid.tokens(), dim], data)
}

pub struct DecodedVars {
    pub logits: Var,
    pub boxes: Var,
}

impl DetectionHead {
    pub fn new(init: &mut Init<'_>, name: &str, config: HeadConfig) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} attention heads",
                config.dim, config.heads
            )));
        }
        if config.queries == 0 {
            return Err(Error::Config("at least one query is required".into()));
        }
        let mut init = init.sub(name);
        let d = config.dim;
        let queries = init.normal("queries", &[config.queries, d], 1.0);
        let query_pos = init.normal("query_pos", &[config.queries, d], 1.0);
        let level_embed = (0..config.levels)
            .map(|l| init.normal(&format!("level_embed.{l}"), &[d], 0.1))
            .collect();
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(&mut init, &format!("layer.{i}"), d, config.heads))
            .collect();
        let class_head = Linear::new(&mut init, "class", d, config.classes + 1, true);
        let box_head = Mlp::new(&mut init, "box", &[d, d, d, 4]);
        Ok(Self {
            config,
            queries,
            query_pos,
            level_embed,
            layers,
            class_head,
            box_head,
        })
    }

    /// Concatenates the levels into one memory with matching positional codes.
    pub fn memory<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        levels: &[LevelOutput],
    ) -> Result<(Var, Var)> {
        if levels.is_empty() {
            return Err(Error::shape("decode", "empty pyramid"));
        }
        if levels.len() > self.level_embed.len() {
            return Err(Error::Config(format!(
                "{} pyramid levels but the head knows {}",
                levels.len(),
                self.level_embed.len()
            )));
        }
        let mut tokens = Vec::with_capacity(levels.len());
        let mut positions = Vec::with_capacity(levels.len());
        for (l, level) in levels.iter().enumerate() {
            tokens.push(level.tokens);
            let pe = g.constant(level_positions(&level.grid, 1 << l, self.config.dim)?);
            positions.push(g.add_row(pe, p[self.level_embed[l]])?);
        }
        Ok((g.concat_rows(&tokens)?, g.concat_rows(&positions)?))
    }

    /// Runs the decoder over a memory and its positional codes.
    pub fn decode<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        memory: Var,
        memory_pos: Var,
    ) -> Result<DecodedVars> {
        let mut x = p[self.queries];
        for layer in &self.layers {
            x = layer.forward(g, p, x, p[self.query_pos], memory, memory_pos)?;
        }
        let logits = self.class_head.forward(g, p, x)?;
        let raw = self.box_head.forward(g, p, x)?;
        let boxes = g.sigmoid(raw)?;
        Ok(DecodedVars { logits, boxes })
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        levels: &[LevelOutput],
    ) -> Result<DecodedVars> {
        let (memory, pos) = self.memory(g, p, levels)?;
        self.decode(g, p, memory, pos)
    }
}

/// Value-level decode of a `T × D` memory with its positional codes.
pub fn decode_memory<T: Real>(
    head: &DetectionHead,
    store: &ParamStore<T>,
    memory: &Tensor<T>,
    memory_pos: &Tensor<T>,
) -> Result<DetectionSet<T>> {
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let m = g.constant(memory.clone());
    let pos = g.constant(memory_pos.clone());
    let out = head.decode(&g, &p, m, pos)?;
    let set = DetectionSet {
        class_logits: g.value(out.logits).clone(),
        boxes: g.value(out.boxes).clone(),
    };
    Ok(set)
}
