//! Downsampling-only feature pyramid: stride-2 depthwise convolutions with
//! SSM blocks between stages.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::ssm::{BidirectionalBlock, BlockOptions};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::PatchGrid;

pub const DEFAULT_LEVELS: usize = 3;
pub const KERNEL_SIZE: usize = 3;

/// Depthwise `3×3` stride-2 kernel followed by a pointwise `D×D` mix.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub kernel: ParamId,
    pub pointwise: Linear,
}

#[derive(Clone, Debug)]
pub struct FpnLevel {
    /// Absent on level 0, which keeps the token resolution.
    pub downsample: Option<Downsample>,
    pub block: BidirectionalBlock,
}

#[derive(Clone, Debug)]
pub struct EfficientFpn {
    pub levels: Vec<FpnLevel>,
}

/// One pyramid level in sequence form: `T_l × D` rows in raster order.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub tokens: Var,
    pub grid: PatchGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures<T: Real> {
    /// `D × rows_l × cols_l` maps, finest first.
    pub levels: Vec<Tensor<T>>,
    /// Stride of each level relative to the token grid.
    pub strides: Vec<usize>,
}

/// `ceil(n / 2)`: output extent of a `3×3` stride-2 convolution with padding 1.
pub fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Grids of every level, or an error if the grid cannot get coarser
/// `levels − 1` times.
pub fn level_grids(grid: &PatchGrid, levels: usize) -> Result<Vec<PatchGrid>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let mut out = vec![PatchGrid::cells(grid.rows, grid.cols, grid.patch)];
    for l in 1..levels {
        let prev = out[l - 1];
        if prev.rows == 1 && prev.cols == 1 {
            return Err(Error::Config(format!(
                "a {}x{} token grid cannot be downsampled {} times",
                grid.rows,
                grid.cols,
                levels - 1
            )));
        }
        out.push(PatchGrid::cells(
            halve(prev.rows),
            halve(prev.cols),
            prev.patch * 2,
        ));
    }
    Ok(out)
}

/// `T × D` sequence to a `D × rows × cols` map.
pub fn to_map<T: Real>(g: &Graph<T>, tokens: Var, grid: &PatchGrid) -> Result<Var> {
    let t = g.transpose(tokens)?;
    let dim = g.value(t).dims2()?.0;
    g.reshape(t, &[dim, grid.rows, grid.cols])
}

/// `D × rows × cols` map to a `T × D` sequence.
pub fn to_sequence<T: Real>(g: &Graph<T>, map: Var) -> Result<Var> {
    let (dim, rows, cols) = g.value(map).dims3()?;
    let flat = g.reshape(map, &[dim, rows * cols])?;
    g.transpose(flat)
}

impl Downsample {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        let mut init = init.sub(name);
        let bound = 1.0 / KERNEL_SIZE as f32;
        Self {
            kernel: init.uniform("depthwise", &[dim, KERNEL_SIZE, KERNEL_SIZE], bound),
            pointwise: Linear::new(&mut init, "pointwise", dim, dim, true),
        }
    }

    /// `T_l × D` sequence on `grid` to the next level's sequence.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        tokens: Var,
        grid: &PatchGrid,
    ) -> Result<Var> {
        let map = to_map(g, tokens, grid)?;
        let down = g.depthwise_conv2d(map, p[self.kernel], 2, KERNEL_SIZE / 2)?;
        let seq = to_sequence(g, down)?;
        self.pointwise.forward(g, p, seq)
    }
}

impl EfficientFpn {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        levels: usize,
        dim: usize,
        state: usize,
        options: BlockOptions,
    ) -> Self {
        let mut init = init.sub(name);
        let levels = (0..levels)
            .map(|l| {
                let mut level = init.sub(&l.to_string());
                let downsample = (l > 0).then(|| Downsample::new(&mut level, "down", dim));
                FpnLevel {
                    downsample,
                    block: BidirectionalBlock::new(&mut level, "block", dim, state, options),
                }
            })
            .collect();
        Self { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        tokens: Var,
        grid: &PatchGrid,
    ) -> Result<Vec<LevelOutput>> {
        let grids = level_grids(grid, self.levels.len())?;
        let mut out: Vec<LevelOutput> = Vec::with_capacity(grids.len());
        for (l, level) in self.levels.iter().enumerate() {
            let input = match (&level.downsample, out.last()) {
                (Some(down), Some(prev)) => down.forward(g, p, prev.tokens, &prev.grid)?,
                _ => tokens,
            };
            let tokens = level.block.apply(g, p, input)?;
            out.push(LevelOutput {
                tokens,
                grid: grids[l],
            });
        }
        Ok(out)
    }
}

/// Value-level pyramid over a `T × D` token matrix.
pub fn efficient_fpn<T: Real>(
    tokens: &Tensor<T>,
    grid: &PatchGrid,
    fpn: &EfficientFpn,
    store: &ParamStore<T>,
) -> Result<PyramidFeatures<T>> {
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let x = g.constant(tokens.clone());
    let outs = fpn.forward(&g, &p, x, grid)?;
    let mut levels = Vec::with_capacity(outs.len());
    let mut strides = Vec::with_capacity(outs.len());
    for (l, o) in outs.iter().enumerate() {
        let map = to_map(&g, o.tokens, &o.grid)?;
        levels.push(g.value(map).clone());
        strides.push(1 << l);
    }
    Ok(PyramidFeatures { levels, strides })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_shapes() {
        let grids = level_grids(&PatchGrid::cells(8, 8, 1), 3).unwrap();
        let dims: Vec<_> = grids.iter().map(|g| (g.rows, g.cols)).collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2)]);
        let grids = level_grids(&PatchGrid::cells(5, 3, 1), 3).unwrap();
        let dims: Vec<_> = grids.iter().map(|g| (g.rows, g.cols)).collect();
        assert_eq!(dims, vec![(5, 3), (3, 2), (2, 1)]);
    }

    #[test]
    fn too_small_grid() {
        assert!(matches!(
            level_grids(&PatchGrid::cells(2, 1, 1), 3),
            Err(Error::Config(_))
        ));
        assert!(level_grids(&PatchGrid::cells(1, 1, 1), 1).is_ok());
    }

    #[test]
    fn map_round_trip() {
        let g = Graph::<f64>::new();
        let grid = PatchGrid::cells(2, 3, 1);
        let x = g.constant(Tensor::from_fn(&[6, 4], |i| i as f64));
        let m = to_map(&g, x, &grid).unwrap();
        assert_eq!(g.shape(m), vec![4, 2, 3]);
        // channel 1 of token (row 1, col 2) = token 5
        assert_eq!(g.value(m).data()[6 + 5], 5.0 * 4.0 + 1.0);
        let back = to_sequence(&g, m).unwrap();
        assert_eq!(*g.value(back), *g.value(x));
    }
}
