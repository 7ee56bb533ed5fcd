//! Small building blocks shared by the backbone, classifier and head.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Row-vector affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut init = init.sub(name);
        let weight = init.xavier("weight", in_dim, out_dim);
        let bias = bias.then(|| init.zeros("bias", &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalisation with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        let mut init = init.sub(name);
        Self {
            gain: init.ones("gain", &[dim]),
            shift: init.zeros("shift", &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layernorm_rows(x)?;
        let s = g.mul_row(n, p[self.gain])?;
        g.add_row(s, p[self.shift])
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &[usize]) -> Self {
        let mut init = init.sub(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut init, &i.to_string(), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }
}
