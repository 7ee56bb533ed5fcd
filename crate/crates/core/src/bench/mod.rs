//! Complexity counters, wall-clock scaling runs and report emission.

pub mod flops;
pub mod kernels;
pub mod report;

use std::time::{Duration, Instant};

pub use flops::{block_per_token, count_flops, total_flops, Component, FpnVariant};
pub use kernels::{dense_attention, BenchInputs, BenchKernel};
pub use report::{emit_report, read_csv, CsvRow};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Transformer,
    Mamba,
    Cnn,
}

/// Symbolic cost of one architecture family with unit constant factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityModel {
    pub family: Family,
}

/// Arguments of the cost expressions: `H` is the image side, `K` the
/// convolution kernel side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostArgs {
    pub tokens: f64,
    pub dim: f64,
    pub height: f64,
    pub patch: f64,
    pub kernel: f64,
    pub state: f64,
}

impl ComplexityModel {
    pub fn name(&self) -> &'static str {
        match self.family {
            Family::Transformer => "transformer",
            Family::Mamba => "mamba",
            Family::Cnn => "cnn",
        }
    }

    /// Words of memory: `T² + TD`, `TD + DK + D²` or `H²D + K²D²`.
    pub fn space(&self, a: &CostArgs) -> f64 {
        match self.family {
            Family::Transformer => a.tokens * a.tokens + a.tokens * a.dim,
            Family::Mamba => a.tokens * a.dim + a.dim * a.kernel + a.dim * a.dim,
            Family::Cnn => a.height * a.height * a.dim + a.kernel * a.kernel * a.dim * a.dim,
        }
    }

    /// Multiply-accumulates: `T²D + TD²`, `TDN + TD²` or `H²K²D²`.
    pub fn time(&self, a: &CostArgs) -> f64 {
        match self.family {
            Family::Transformer => a.tokens * a.tokens * a.dim + a.tokens * a.dim * a.dim,
            Family::Mamba => a.tokens * a.dim * a.state + a.tokens * a.dim * a.dim,
            Family::Cnn => a.height * a.height * a.kernel * a.kernel * a.dim * a.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRun {
    pub kernel: String,
    pub sizes: Vec<usize>,
    pub median_seconds: Vec<f64>,
    pub peak_bytes: Vec<usize>,
    /// Least-squares fit of `ln time` on `ln T`; absent with fewer than two sizes.
    pub fit: Option<LogLogFit>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares on `(ln x, ln y)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<LogLogFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(LogLogFit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingOptions {
    pub repetitions: usize,
    pub warmups: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmups: 2,
        }
    }
}

/// Smallest nonzero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Medians below this many timer ticks are considered unresolved.
pub const MIN_TICKS: f64 = 100.0;

/// Times one kernel over strictly increasing sizes on the calling thread.
pub fn bench_kernel(
    kernel: BenchKernel,
    sizes: &[usize],
    dim: usize,
    state: usize,
    opts: TimingOptions,
) -> Result<ScalingRun> {
    if sizes.is_empty() {
        return Err(Error::Config("no benchmark sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Config(format!(
            "benchmark sizes {sizes:?} must be positive and strictly increasing"
        )));
    }
    if opts.repetitions < 5 || opts.warmups < 2 {
        return Err(Error::Config(
            "benchmarks need at least 5 repetitions and 2 warm-ups".into(),
        ));
    }
    let floor = timer_resolution().as_secs_f64() * MIN_TICKS;
    let mut run = ScalingRun {
        kernel: kernel.name().to_string(),
        sizes: Vec::new(),
        median_seconds: Vec::new(),
        peak_bytes: Vec::new(),
        fit: None,
    };
    for (i, &t) in sizes.iter().enumerate() {
        let inputs = BenchInputs::new(t, dim, state, i as u64);
        for _ in 0..opts.warmups {
            std::hint::black_box(inputs.run(kernel)?);
        }
        let mut times = Vec::with_capacity(opts.repetitions);
        for _ in 0..opts.repetitions {
            let start = Instant::now();
            std::hint::black_box(inputs.run(kernel)?);
            times.push(start.elapsed().as_secs_f64());
        }
        let m = median(&mut times);
        if m < floor {
            log::warn!(
                "{}: T = {t} ran in {m:.3e} s, below timer resolution; size dropped",
                kernel.name()
            );
            continue;
        }
        run.sizes.push(t);
        run.median_seconds.push(m);
        run.peak_bytes.push(kernel.peak_bytes(t, dim, state));
    }
    let xs: Vec<f64> = run.sizes.iter().map(|&t| t as f64).collect();
    run.fit = fit_loglog(&xs, &run.median_seconds);
    if run.fit.is_none() {
        log::warn!(
            "{}: fewer than two usable sizes, slope omitted",
            kernel.name()
        );
    }
    Ok(run)
}

/// Powers of two from `2^lo` to `2^hi` inclusive.
pub fn octaves(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}
