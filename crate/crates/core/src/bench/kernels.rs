//! Timed kernels and their analytic working-set estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{depthwise_conv2d, matmul, softmax_rows};
use crate::ssm::kernels::scan_lanes_blelloch;
use crate::tensor::Tensor;

const F32: usize = std::mem::size_of::<f32>();
/// Query rows per attention block.
pub const ATTENTION_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchKernel {
    SsmScanSeq,
    SsmScanPar,
    DenseAttention,
    DepthwiseConv,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 4] = [
        BenchKernel::SsmScanSeq,
        BenchKernel::SsmScanPar,
        BenchKernel::DenseAttention,
        BenchKernel::DepthwiseConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::SsmScanSeq => "ssm_scan_seq",
            BenchKernel::SsmScanPar => "ssm_scan_par",
            BenchKernel::DenseAttention => "dense_attention",
            BenchKernel::DepthwiseConv => "depthwise_conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Bytes of transient buffers live at the kernel's peak, inputs excluded.
    pub fn peak_bytes(self, tokens: usize, dim: usize, state: usize) -> usize {
        let output = tokens * dim;
        let words = match self {
            BenchKernel::SsmScanSeq => dim * state + output,
            BenchKernel::SsmScanPar => {
                let padded = tokens.next_power_of_two();
                // Discretised decay and input, the sweep's copies, the states.
                2 * tokens * dim * state + 2 * padded * dim * state + tokens * dim * state + output
            }
            BenchKernel::DenseAttention => ATTENTION_CHUNK.min(tokens) * tokens * 2 + output,
            BenchKernel::DepthwiseConv => output,
        };
        words * F32
    }
}

/// Random inputs for every kernel at one sequence length.
pub struct BenchInputs {
    pub tokens: usize,
    pub dim: usize,
    pub state: usize,
    /// `T × D` tokens, also used as attention queries.
    pub u: Tensor<f32>,
    pub delta: Tensor<f32>,
    /// `D × N`, negative.
    pub a: Tensor<f32>,
    /// `T × N`
    pub b: Tensor<f32>,
    pub c: Tensor<f32>,
    pub keys: Tensor<f32>,
    pub values: Tensor<f32>,
    pub kernel: Tensor<f32>,
}

impl BenchInputs {
    pub fn new(tokens: usize, dim: usize, state: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t =
            |shape: &[usize], lo: f32, hi: f32| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        Self {
            tokens,
            dim,
            state,
            u: t(&[tokens, dim], -1.0, 1.0),
            delta: t(&[tokens, dim], 0.001, 0.1),
            a: t(&[dim, state], -2.0, -0.1),
            b: t(&[tokens, state], -1.0, 1.0),
            c: t(&[tokens, state], -1.0, 1.0),
            keys: t(&[tokens, dim], -1.0, 1.0),
            values: t(&[tokens, dim], -1.0, 1.0),
            kernel: t(&[dim, 3, 3], -0.3, 0.3),
        }
    }

    pub fn run(&self, kernel: BenchKernel) -> Result<Tensor<f32>> {
        match kernel {
            BenchKernel::SsmScanSeq => Ok(selective_scan_fused(self)),
            BenchKernel::SsmScanPar => Ok(selective_scan_blelloch(self)),
            BenchKernel::DenseAttention => dense_attention(&self.u, &self.keys, &self.values),
            BenchKernel::DepthwiseConv => {
                let (rows, cols) = square_grid(self.tokens);
                let map = self.u.transpose2()?.reshape(&[self.dim, rows, cols])?;
                depthwise_conv2d(&map, &self.kernel, 1, 1)
            }
        }
    }
}

/// Near-square factorisation `rows × cols = tokens` with `rows` a power of two.
pub fn square_grid(tokens: usize) -> (usize, usize) {
    let mut rows = 1;
    while rows * 2 * rows * 2 <= tokens && tokens.is_multiple_of(rows * 2) {
        rows *= 2;
    }
    (rows, tokens / rows)
}

/// Selective scan holding only the `D × N` state between steps.
pub fn selective_scan_fused(x: &BenchInputs) -> Tensor<f32> {
    let (t_len, d, n) = (x.tokens, x.dim, x.state);
    let mut state = vec![0.0f32; d * n];
    let mut y = vec![0.0f32; t_len * d];
    let a = x.a.data();
    for t in 0..t_len {
        let (u, delta) = (x.u.row(t), x.delta.row(t));
        let (b, c) = (x.b.row(t), x.c.row(t));
        for k in 0..d {
            let s = &mut state[k * n..(k + 1) * n];
            let ak = &a[k * n..(k + 1) * n];
            let mut acc = u[k];
            for j in 0..n {
                s[j] = (delta[k] * ak[j]).exp() * s[j] + delta[k] * b[j] * u[k];
                acc += c[j] * s[j];
            }
            y[t * d + k] = acc;
        }
    }
    Tensor::from_parts(vec![t_len, d], y)
}

/// The same scan with all `T × D × N` coefficients materialised and solved
/// by the Blelloch kernel.
pub fn selective_scan_blelloch(x: &BenchInputs) -> Tensor<f32> {
    let (t_len, d, n) = (x.tokens, x.dim, x.state);
    let lanes = d * n;
    let mut decay = vec![0.0f32; t_len * lanes];
    let mut input = vec![0.0f32; t_len * lanes];
    let a = x.a.data();
    for t in 0..t_len {
        let (u, delta, b) = (x.u.row(t), x.delta.row(t), x.b.row(t));
        for k in 0..d {
            for j in 0..n {
                decay[t * lanes + k * n + j] = (delta[k] * a[k * n + j]).exp();
                input[t * lanes + k * n + j] = delta[k] * b[j] * u[k];
            }
        }
    }
    let states = scan_lanes_blelloch(&decay, &input, &vec![0.0; lanes], lanes);
    let mut y = vec![0.0f32; t_len * d];
    for t in 0..t_len {
        let (u, c) = (x.u.row(t), x.c.row(t));
        for k in 0..d {
            let s = &states[t * lanes + k * n..t * lanes + (k + 1) * n];
            y[t * d + k] = u[k] + s.iter().zip(c).map(|(s, c)| s * c).sum::<f32>();
        }
    }
    Tensor::from_parts(vec![t_len, d], y)
}

/// `softmax(QKᵀ/√D)V`, processed in blocks of query rows.
pub fn dense_attention(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (t_len, d) = q.dims2()?;
    if k.dims2()? != (t_len, d) || v.dims2()? != (t_len, d) {
        return Err(Error::shape(
            "dense_attention",
            "q, k and v must share their shape",
        ));
    }
    let kt = k.transpose2()?;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Vec::with_capacity(t_len * d);
    for start in (0..t_len).step_by(ATTENTION_CHUNK) {
        let end = (start + ATTENTION_CHUNK).min(t_len);
        let rows = Tensor::from_parts(vec![end - start, d], q.data()[start * d..end * d].to_vec());
        let scores = matmul(&rows, &kt)?.map(|s| s * scale);
        let weights = softmax_rows(&scores)?;
        out.extend_from_slice(matmul(&weights, v)?.data());
    }
    Ok(Tensor::from_parts(vec![t_len, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::kernels::scan_lanes_sequential;

    #[test]
    fn fused_and_blelloch_scans_agree() {
        let x = BenchInputs::new(37, 4, 3, 1);
        let a = selective_scan_fused(&x);
        let b = selective_scan_blelloch(&x);
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn fused_scan_matches_lane_kernel() {
        let x = BenchInputs::new(9, 2, 2, 4);
        let lanes = 4;
        let mut decay = vec![0.0f32; 9 * lanes];
        let mut input = vec![0.0f32; 9 * lanes];
        for t in 0..9 {
            for k in 0..2 {
                for j in 0..2 {
                    let dl = x.delta.row(t)[k];
                    decay[t * lanes + k * 2 + j] = (dl * x.a.data()[k * 2 + j]).exp();
                    input[t * lanes + k * 2 + j] = dl * x.b.row(t)[j] * x.u.row(t)[k];
                }
            }
        }
        let states = scan_lanes_sequential(&decay, &input, &[0.0; 4], lanes);
        let y = selective_scan_fused(&x);
        let t = 8;
        let expect: f32 = x.u.row(t)[1]
            + (0..2)
                .map(|j| x.c.row(t)[j] * states[t * lanes + 2 + j])
                .sum::<f32>();
        assert!((y.at2(t, 1) - expect).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let x = BenchInputs::new(300, 4, 1, 2);
        let ones = Tensor::full(&[300, 4], 1.0f32);
        let y = dense_attention(&x.u, &x.keys, &ones).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn sequential_working_set_is_flat_in_length() {
        let k = BenchKernel::SsmScanSeq;
        let extra = |t: usize| k.peak_bytes(t, 64, 16) - t * 64 * F32;
        assert_eq!(extra(1 << 10), extra(1 << 15));
        // Blocked attention keeps a chunk of score rows, linear in T.
        let attn = |t| BenchKernel::DenseAttention.peak_bytes(t, 64, 16);
        assert_eq!(attn(1 << 12), 2 * attn(1 << 11));
    }

    #[test]
    fn grids() {
        assert_eq!(square_grid(1024), (32, 32));
        assert_eq!(square_grid(2048), (32, 64));
        assert_eq!(square_grid(7), (1, 7));
    }
}
