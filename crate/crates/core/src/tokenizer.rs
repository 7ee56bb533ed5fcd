//! Patch tokenisation, 2D sinusoidal positions and sequence/grid conversion.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Geometry of a padded `rows × cols` grid of `patch × patch` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || patch > height.min(width) {
            return Err(Error::Config(format!(
                "patch size {patch} must be in 1..={} for a {height}x{width} image",
                height.min(width)
            )));
        }
        let rows = height.div_ceil(patch);
        let cols = width.div_ceil(patch);
        Ok(Self {
            patch,
            rows,
            cols,
            pad_bottom: rows * patch - height,
            pad_right: cols * patch - width,
        })
    }

    /// Grid of a given shape with no padding (used for pyramid levels).
    pub fn cells(rows: usize, cols: usize, patch: usize) -> Self {
        Self {
            patch,
            rows,
            cols,
            pad_bottom: 0,
            pad_right: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.patch
    }

    pub fn image_height(&self) -> usize {
        self.padded_height() - self.pad_bottom
    }

    pub fn image_width(&self) -> usize {
        self.padded_width() - self.pad_right
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Real> {
    /// `T × D`, raster order.
    pub tokens: Tensor<T>,
    pub grid: PatchGrid,
    pub positions: Vec<(usize, usize)>,
}

/// Shared patch projection `(3·Z²) × D` plus bias.
#[derive(Clone, Debug)]
pub struct EmbedParams<T: Real> {
    pub projection: Tensor<T>,
    pub bias: Tensor<T>,
}

fn sinusoid_half<T: Real>(pos: f64, quarter: usize, out: &mut [T]) {
    for i in 0..quarter {
        let freq = 10000f64.powf(-(i as f64) / quarter as f64);
        let phase = pos * freq;
        out[2 * i] = T::lit(phase.sin());
        out[2 * i + 1] = T::lit(phase.cos());
    }
}

/// Fixed 2D code: the first `D/2` entries encode the row, the last `D/2` the
/// column, each as interleaved `sin, cos` pairs at frequencies `10000^(−i/(D/4))`.
pub fn positional_encoding<T: Real>(row: usize, col: usize, dim: usize) -> Result<Tensor<T>> {
    positional_encoding_at(row as f64, col as f64, dim)
}

/// Same code evaluated at fractional grid coordinates.
pub fn positional_encoding_at<T: Real>(row: f64, col: f64, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding width {dim} is not a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let mut out = vec![T::zero(); dim];
    let (r, c) = out.split_at_mut(dim / 2);
    sinusoid_half(row, quarter, r);
    sinusoid_half(col, quarter, c);
    Ok(Tensor::from_parts(vec![dim], out))
}

/// Positional codes for every cell of a grid, `T × D` in raster order.
pub fn grid_encoding<T: Real>(grid: &PatchGrid, dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(grid.tokens() * dim);
    for (r, c) in grid.positions() {
        data.extend_from_slice(positional_encoding::<T>(r, c, dim)?.data());
    }
    Ok(Tensor::from_parts(vec![grid.tokens(), dim], data))
}

/// Flattens every `Z × Z × 3` patch of a zero-padded `3 × H × W` image into
/// one row of a `T × 3Z²` matrix, channel-major then row then column.
pub fn extract_patches<T: Real>(image: &Tensor<T>, patch: usize) -> Result<(Tensor<T>, PatchGrid)> {
    let (channels, height, width) = image.dims3()?;
    if channels != 3 {
        return Err(Error::shape(
            "tokenize",
            format!("expected 3 channels, got {channels}"),
        ));
    }
    let grid = PatchGrid::new(height, width, patch)?;
    let cols = 3 * patch * patch;
    let mut data = vec![T::zero(); grid.tokens() * cols];
    let px = image.data();
    for (t, (r, c)) in grid.positions().into_iter().enumerate() {
        let row = &mut data[t * cols..(t + 1) * cols];
        for ch in 0..3 {
            for dy in 0..patch {
                let y = r * patch + dy;
                if y >= height {
                    break;
                }
                for dx in 0..patch {
                    let x = c * patch + dx;
                    if x >= width {
                        break;
                    }
                    row[(ch * patch + dy) * patch + dx] = px[(ch * height + y) * width + x];
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![grid.tokens(), cols], data), grid))
}

/// `u_t = patch_t · P + b + p_t` for every patch.
pub fn tokenize<T: Real>(
    image: &Tensor<T>,
    patch: usize,
    params: &EmbedParams<T>,
) -> Result<TokenSequence<T>> {
    let (patches, grid) = extract_patches(image, patch)?;
    let (_, dim) = params.projection.dims2()?;
    let mut tokens = crate::ops::matmul(&patches, &params.projection)?;
    let pe = grid_encoding::<T>(&grid, dim)?;
    if params.bias.len() != dim {
        return Err(Error::shape(
            "tokenize",
            format!("bias length {} != {dim}", params.bias.len()),
        ));
    }
    let bias = params.bias.data();
    for (t, row) in tokens.data_mut().chunks_mut(dim).enumerate() {
        for ((v, b), p) in row.iter_mut().zip(bias).zip(pe.row(t)) {
            *v = *v + *b + *p;
        }
    }
    Ok(TokenSequence {
        tokens,
        positions: grid.positions(),
        grid,
    })
}

/// Places token `t` at its `(row, col)` in a `D × rows × cols` map.
pub fn regrid<T: Real>(seq: &TokenSequence<T>) -> Result<Tensor<T>> {
    let grid = &seq.grid;
    let (count, dim) = seq.tokens.dims2()?;
    if count != grid.tokens() || seq.positions.len() != count {
        return Err(Error::Integrity(format!(
            "{count} tokens and {} positions for a {}x{} grid",
            seq.positions.len(),
            grid.rows,
            grid.cols
        )));
    }
    let cells = grid.tokens();
    let mut seen = vec![false; cells];
    let mut out = vec![T::zero(); dim * cells];
    for (t, &(r, c)) in seq.positions.iter().enumerate() {
        if r >= grid.rows || c >= grid.cols {
            return Err(Error::Integrity(format!(
                "position ({r}, {c}) outside the grid"
            )));
        }
        let cell = r * grid.cols + c;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::Integrity(format!("duplicate position ({r}, {c})")));
        }
        for (d, v) in seq.tokens.row(t).iter().enumerate() {
            out[d * cells + cell] = *v;
        }
    }
    Ok(Tensor::from_parts(vec![dim, grid.rows, grid.cols], out))
}

/// Inverse of [`regrid`]: raster-order rows of a `D × rows × cols` map.
pub fn flatten<T: Real>(map: &Tensor<T>, grid: PatchGrid) -> Result<TokenSequence<T>> {
    let (dim, rows, cols) = map.dims3()?;
    if rows != grid.rows || cols != grid.cols {
        return Err(Error::shape(
            "flatten",
            format!("map is {rows}x{cols}, grid is {}x{}", grid.rows, grid.cols),
        ));
    }
    let cells = rows * cols;
    let src = map.data();
    let data = (0..cells)
        .flat_map(|cell| (0..dim).map(move |d| src[d * cells + cell]))
        .collect();
    Ok(TokenSequence {
        tokens: Tensor::from_parts(vec![cells, dim], data),
        positions: grid.positions(),
        grid,
    })
}

/// Trainable patch embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub projection: ParamId,
    pub bias: ParamId,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, name: &str, patch: usize, dim: usize) -> Self {
        let mut init = init.sub(name);
        let fan_in = 3 * patch * patch;
        Self {
            projection: init.xavier("projection", fan_in, dim),
            bias: init.zeros("bias", &[dim]),
            patch,
            dim,
        }
    }

    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> EmbedParams<T> {
        EmbedParams {
            projection: store.get(self.projection).clone(),
            bias: store.get(self.bias).clone(),
        }
    }

    /// Embeds a `T × 3Z²` patch matrix and adds the grid's positional codes.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        patches: &Tensor<T>,
        grid: &PatchGrid,
    ) -> Result<Var> {
        let x = g.constant(patches.clone());
        let y = g.matmul(x, p[self.projection])?;
        let y = g.add_row(y, p[self.bias])?;
        let pe = g.constant(grid_encoding(grid, self.dim)?);
        g.add(y, pe)
    }
}
