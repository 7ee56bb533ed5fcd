//! Central-difference verification of reverse-mode gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    pub step_size: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_parameter_errors
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor: `rel = |a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            samples_per_tensor: 32,
            seed: 0,
            floor: 1e-6,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&Graph<f64>, &Bound) -> Result<Var>,
{
    let g = Graph::new();
    let bound = params.bind(&g);
    let out = f(&g, &bound)?;
    Ok(g.scalar(out))
}

/// Compares the reverse-mode gradient of `f` at `params` with central
/// differences `(f(p+h) − f(p−h)) / 2h` on sampled coordinates.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &Bound) -> Result<Var> + Sync,
{
    if opts.samples_per_tensor < 32 {
        return Err(Error::Config(
            "grad_check samples at least 32 coordinates per tensor".into(),
        ));
    }
    let g = Graph::new();
    let bound = params.bind(&g);
    let out = f(&g, &bound)?;
    let first = g.scalar(out);
    let mut grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| {
            grads
                .take(bound[id])
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; params.get(id).len()])
        })
        .collect();
    drop(g);

    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let per_parameter: Vec<Result<(String, f64)>> = params
        .ids()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|id| {
            let len = params.get(id).len();
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9),
            );
            let coords: Vec<usize> = if len <= opts.samples_per_tensor {
                (0..len).collect()
            } else {
                let mut c = sample(&mut rng, len, opts.samples_per_tensor).into_vec();
                c.sort_unstable();
                c
            };
            let mut local = params.clone();
            let mut worst = 0.0f64;
            for i in coords {
                let orig = local.get(id).data()[i];
                local.get_mut(id).data_mut()[i] = orig + opts.step;
                let plus = evaluate(&f, &local)?;
                local.get_mut(id).data_mut()[i] = orig - opts.step;
                let minus = evaluate(&f, &local)?;
                local.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * opts.step);
                worst = worst.max(relative_error(analytic[id.index()][i], numeric, opts.floor));
            }
            Ok((params.name(id).to_string(), worst))
        })
        .collect();
    let per_parameter_errors = per_parameter.into_iter().collect::<Result<Vec<_>>>()?;
    let max_relative_error = per_parameter_errors.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_parameter_errors,
        step_size: opts.step,
    })
}
