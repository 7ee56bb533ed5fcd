//! Differentiable bidirectional SSM blocks and stacks.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Activation, LayerNorm, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::ssm::kernels::ScanKernel;
use crate::ssm::scan::{SelectiveProjections, SsmDirectionParams, StateMatrix};
use crate::tensor::{Real, Tensor};

/// Input-dependent direction: `Δ, B, C` are projections of the current token.
#[derive(Clone, Debug)]
pub struct SelectiveDirection {
    pub delta_proj: Linear,
    /// `a = −exp(a_log)` keeps the continuous diagonal negative.
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub skip: ParamId,
}

impl SelectiveDirection {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, state: usize) -> Self {
        let mut init = init.sub(name);
        let bound = 1.0 / (dim as f32).sqrt();
        let delta_w = init.uniform("delta.weight", &[dim, dim], 0.1 * bound);
        // Step sizes start log-uniform in [1e-3, 1e-1].
        let biases: Vec<f32> = (0..dim)
            .map(|_| {
                let dt = (init.rng().gen_range((1e-3f32).ln()..(1e-1f32).ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let delta_b = init.tensor("delta.bias", Tensor::from_parts(vec![dim], biases));
        let a_log = init.tensor(
            "a_log",
            Tensor::from_fn(&[state], |i| ((i + 1) as f32).ln()),
        );
        let w_b = init.uniform("w_b", &[dim, state], bound);
        let w_c = init.uniform("w_c", &[dim, state], bound);
        let skip = init.ones("skip", &[dim]);
        Self {
            delta_proj: Linear {
                weight: delta_w,
                bias: Some(delta_b),
                in_dim: dim,
                out_dim: dim,
            },
            a_log,
            w_b,
            w_c,
            skip,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        u: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        let pre = self.delta_proj.forward(g, p, u)?;
        let delta = g.softplus(pre)?;
        let a = g.exp(p[self.a_log])?;
        let a = g.scale(a, -T::one());
        let b = g.matmul(u, p[self.w_b])?;
        let c = g.matmul(u, p[self.w_c])?;
        let y = g.selective_scan(u, delta, a, b, c, kernel)?;
        let skip = g.mul_row(u, p[self.skip])?;
        g.add(y, skip)
    }

    pub fn projections<T: Real>(&self, store: &ParamStore<T>) -> SelectiveProjections<T> {
        SelectiveProjections {
            w_delta: store.get(self.delta_proj.weight).clone(),
            b_delta: store.get(self.delta_proj.bias.expect("delta bias")).clone(),
            a: store.get(self.a_log).map(|v| -v.exp()),
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
        }
    }
}

/// Constant-matrix direction (`Ā` diagonal `[N]` or dense `[N×N]`).
#[derive(Clone, Debug)]
pub struct FixedDirection {
    pub a: ParamId,
    /// `N × D_in`
    pub b: ParamId,
    /// `D_out × N`
    pub c: ParamId,
    /// `D_out × D_in`
    pub d: ParamId,
}

impl FixedDirection {
    /// Random stable initialisation; a diagonal `Ā` has entries in `(0, 1)`.
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, state: usize, dense: bool) -> Self {
        let mut init = init.sub(name);
        let a = if dense {
            // Scaled so that the spectral norm, hence radius, stays below one.
            let bound = 0.9 / (state as f32).sqrt() / 2.0;
            init.uniform("a", &[state, state], bound)
        } else {
            let rng = init.rng();
            let diag: Vec<f32> = (0..state).map(|_| rng.gen_range(0.05..0.95)).collect();
            init.tensor("a", Tensor::from_parts(vec![state], diag))
        };
        let bound = 1.0 / (dim as f32).sqrt();
        Self {
            a,
            b: init.uniform("b", &[state, dim], bound),
            c: init.uniform("c", &[dim, state], bound),
            d: init.uniform("d", &[dim, dim], bound),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, u: Var) -> Result<Var> {
        let steps = g.value(u).dims2()?.0;
        let bt = g.transpose(p[self.b])?;
        let driven = g.matmul(u, bt)?;
        let states = if g.value(p[self.a]).rank() == 1 {
            let decay = g.broadcast_rows(p[self.a], steps);
            g.diag_recurrence(decay, driven, ScanKernel::Sequential)?
        } else {
            g.dense_recurrence(p[self.a], driven)?
        };
        let ct = g.transpose(p[self.c])?;
        let dt = g.transpose(p[self.d])?;
        let cx = g.matmul(states, ct)?;
        let du = g.matmul(u, dt)?;
        g.add(cx, du)
    }

    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> SsmDirectionParams<T> {
        let a = store.get(self.a);
        SsmDirectionParams {
            a: if a.rank() == 1 {
                StateMatrix::Diagonal(a.data().to_vec())
            } else {
                StateMatrix::Dense(a.clone())
            },
            b: store.get(self.b).clone(),
            c: store.get(self.c).clone(),
            d: store.get(self.d).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum DirectionParams {
    Fixed(FixedDirection),
    Selective(SelectiveDirection),
}

impl DirectionParams {
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        u: Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        match self {
            DirectionParams::Fixed(f) => f.forward(g, p, u),
            DirectionParams::Selective(s) => s.forward(g, p, u, kernel),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmMode {
    Selective,
    FixedDiagonal,
    FixedDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub mode: SsmMode,
    pub activation: Activation,
    pub residual: bool,
    pub norm: bool,
    pub kernel: ScanKernel,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            mode: SsmMode::Selective,
            activation: Activation::Gelu,
            residual: true,
            norm: true,
            kernel: ScanKernel::Sequential,
        }
    }
}

/// `h_t = ϕ(y_t^(f)·W_f + y_t^(b)·W_b)`, with a pre-norm residual wrapper:
/// `out = u + h(LN(u))`.
#[derive(Clone, Debug)]
pub struct BidirectionalBlock {
    pub forward: DirectionParams,
    pub backward: DirectionParams,
    /// `D × D`, applied to forward-stream rows.
    pub w_f: ParamId,
    /// `D × D`, applied to backward-stream rows.
    pub w_b: ParamId,
    pub norm: Option<LayerNorm>,
    pub options: BlockOptions,
}

impl BidirectionalBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        state: usize,
        options: BlockOptions,
    ) -> Self {
        let mut init = init.sub(name);
        let direction = |init: &mut Init<'_>, name: &str| match options.mode {
            SsmMode::Selective => {
                DirectionParams::Selective(SelectiveDirection::new(init, name, dim, state))
            }
            SsmMode::FixedDiagonal => {
                DirectionParams::Fixed(FixedDirection::new(init, name, dim, state, false))
            }
            SsmMode::FixedDense => {
                DirectionParams::Fixed(FixedDirection::new(init, name, dim, state, true))
            }
        };
        let forward = direction(&mut init, "fwd");
        let backward = direction(&mut init, "bwd");
        let bound = 0.5 * (3.0 / dim as f32).sqrt();
        let w_f = init.uniform("w_f", &[dim, dim], bound);
        let w_b = init.uniform("w_b", &[dim, dim], bound);
        let norm = options.norm.then(|| LayerNorm::new(&mut init, "norm", dim));
        Self {
            forward,
            backward,
            w_f,
            w_b,
            norm,
            options,
        }
    }

    /// Output of the forward stream alone (no fusion).
    pub fn forward_stream<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward.forward(g, p, x, self.options.kernel)
    }

    /// Output of the backward stream, scanning `t = T..1`.
    pub fn backward_stream<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let rev = g.reverse_rows(x)?;
        let y = self.backward.forward(g, p, rev, self.options.kernel)?;
        g.reverse_rows(y)
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &Bound, u: Var) -> Result<Var> {
        let x = match &self.norm {
            Some(n) => n.forward(g, p, u)?,
            None => u,
        };
        let yf = self.forward_stream(g, p, x)?;
        let yb = self.backward_stream(g, p, x)?;
        let ff = g.matmul(yf, p[self.w_f])?;
        let fb = g.matmul(yb, p[self.w_b])?;
        let fused = g.add(ff, fb)?;
        let h = self.options.activation.apply(g, fused)?;
        if self.options.residual {
            g.add(u, h)
        } else {
            Ok(h)
        }
    }
}

/// Ordered blocks, each mapping `D → D`.
#[derive(Clone, Debug, Default)]
pub struct SsmStack {
    pub blocks: Vec<BidirectionalBlock>,
}

impl SsmStack {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        depth: usize,
        dim: usize,
        state: usize,
        options: BlockOptions,
    ) -> Self {
        let mut init = init.sub(name);
        Self {
            blocks: (0..depth)
                .map(|i| BidirectionalBlock::new(&mut init, &i.to_string(), dim, state, options))
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn run<T: Real>(&self, g: &Graph<T>, p: &Bound, mut u: Var) -> Result<Var> {
        for block in &self.blocks {
            u = block.apply(g, p, u)?;
        }
        Ok(u)
    }
}

/// Runs a stack on a plain value, recording no gradients.
pub fn run_stack<T: Real>(
    u: &Tensor<T>,
    stack: &SsmStack,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if !u.all_finite() {
        return Err(Error::numeric("run_stack", "non-finite input"));
    }
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let x = g.constant(u.clone());
    let y = stack.run(&g, &p, x)?;
    let out = g.value(y).clone();
    Ok(out)
}
