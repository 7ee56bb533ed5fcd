//! Forward kernels for the operations the detector needs. The autodiff
//! graph calls into these and adds the matching backward rules.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower clamp applied by [`Elementwise::LogClamped`].
pub const LOG_CLAMP_MIN: f64 = 1e-7;
pub const LAYERNORM_EPS: f64 = 1e-5;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?} × {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Spatial geometry of a depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (c, h, w) = match x_shape {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("input must be C×H×W, got {s:?}"),
                ))
            }
        };
        let (kc, k) = match k_shape {
            [kc, kh, kw] if kh == kw => (*kc, *kh),
            s => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("kernel must be C×k×k, got {s:?}"),
                ))
            }
        };
        if kc != c {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel has {kc} channels, input has {c}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                "stride must be at least 1",
            ));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!(
                    "kernel {k}×{k} larger than padded input {}×{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (w + 2 * padding - k) / stride + 1,
        })
    }

    /// Visits every (channel, output index, input index, kernel index) tap that
    /// lands inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        for c in 0..self.channels {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let o = (c * self.out_height + oy) * self.out_width + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let i = (c as isize * h + iy) * w + ix;
                            f(c, o, i as usize, (c * k + ky) * k + kx);
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel spatial convolution with zero padding; no channel mixing.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), kernel.shape(), stride, padding)?;
    Ok(depthwise_forward(&geo, x.data(), kernel.data()))
}

pub(crate) fn depthwise_forward<T: Real>(geo: &ConvGeometry, x: &[T], k: &[T]) -> Tensor<T> {
    let mut out = vec![T::zero(); geo.channels * geo.out_height * geo.out_width];
    geo.for_each_tap(|_, o, i, ki| out[o] = out[o] + x[i] * k[ki]);
    Tensor::from_parts(vec![geo.channels, geo.out_height, geo.out_width], out)
}

/// Returns (grad_input, grad_kernel) for an upstream gradient on the output.
pub(crate) fn depthwise_backward<T: Real>(
    geo: &ConvGeometry,
    x: &[T],
    k: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    geo.for_each_tap(|_, o, i, ki| {
        gx[i] = gx[i] + grad_out[o] * k[ki];
        gk[ki] = gk[ki] + grad_out[o] * x[i];
    });
    (gx, gk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Tanh,
    /// Natural log with the argument clamped to `[1e-7, 1]`.
    LogClamped,
    SoftmaxRows,
    LayerNormRows,
}

impl Elementwise {
    pub fn name(self) -> &'static str {
        match self {
            Elementwise::Gelu => "gelu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Softplus => "softplus",
            Elementwise::Exp => "exp",
            Elementwise::Tanh => "tanh",
            Elementwise::LogClamped => "log_clamped",
            Elementwise::SoftmaxRows => "softmax_rows",
            Elementwise::LayerNormRows => "layernorm_rows",
        }
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_clamped<T: Real>(x: T) -> T {
    x.max(T::lit(LOG_CLAMP_MIN)).min(T::one()).ln()
}

/// Applies a named elementwise (or row-wise) function.
pub fn elementwise<T: Real>(f: Elementwise, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric(f.name(), "NaN in input"));
    }
    Ok(match f {
        Elementwise::Gelu => x.map(gelu),
        Elementwise::Sigmoid => x.map(sigmoid),
        Elementwise::Softplus => x.map(softplus),
        Elementwise::Exp => x.map(T::exp),
        Elementwise::Tanh => x.map(T::tanh),
        Elementwise::LogClamped => x.map(log_clamped),
        Elementwise::SoftmaxRows => softmax_rows(x)?,
        Elementwise::LayerNormRows => layernorm_rows(x)?,
    })
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c).take(r) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Zero-mean, unit-variance normalisation of each row (no affine part).
pub fn layernorm_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2()?;
    let mut out = x.data().to_vec();
    let n = T::lit(c as f64);
    for row in out.chunks_mut(c) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(LAYERNORM_EPS)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_zero_matmul() {
        let a = random(&[3, 3], 1);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let b = random(&[3, 4], 2);
        let z = matmul(&Tensor::<f64>::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[4, 5], 3);
        let b = random(&[5, 2], 4);
        let got = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.at2(i, k) * b.at2(k, j);
                }
                assert!((got.at2(i, j) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&random(&[2, 3], 0), &random(&[4, 2], 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = random(&[2, 5, 6], 5);
        let mut k = Tensor::<f64>::zeros(&[2, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        assert_eq!(depthwise_conv2d(&x, &k, 1, 1).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let x = Tensor::<f64>::ones(&[1, 5, 5]);
        let k = Tensor::<f64>::ones(&[1, 3, 3]);
        let y = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.data()[r * 5 + c], 9.0);
            }
        }
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn depthwise_matches_sliding_window() {
        let x = random(&[3, 7, 6], 6);
        let k = random(&[3, 3, 3], 7);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = depthwise_conv2d(&x, &k, stride, pad).unwrap();
            let (_, oh, ow) = y.dims3().unwrap();
            for c in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                    acc += x.data()[(c * 7 + iy as usize) * 6 + ix as usize]
                                        * k.data()[(c * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        assert!((y.data()[(c * oh + oy) * ow + ox] - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f64>::ones(&[1, 2, 2]);
        let k = Tensor::<f64>::ones(&[1, 5, 5]);
        assert!(depthwise_conv2d(&x, &k, 1, 0).is_err());
        assert!(depthwise_conv2d(&x, &Tensor::ones(&[1, 2, 2]), 1, 0).is_err());
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(log_clamped(0.0f64), (1e-7f64).ln());
        assert_eq!(log_clamped(2.0f64), 0.0);
    }

    #[test]
    fn gelu_gradient_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_normalise() {
        let x = random(&[4, 7], 8).map(|v| v * 50.0);
        let s = softmax_rows(&x).unwrap();
        for r in 0..4 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let x32 = x.cast::<f32>();
        let s32 = softmax_rows(&x32).unwrap();
        for r in 0..4 {
            assert!((s32.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_input_names_operation() {
        let x = Tensor::<f64>::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        let msg = elementwise(Elementwise::Gelu, &x).unwrap_err().to_string();
        assert!(msg.contains("gelu"), "{msg}");
    }

    #[test]
    fn layernorm_rows_standardise() {
        let y = layernorm_rows(&random(&[3, 16], 9)).unwrap();
        for r in 0..3 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 16.0;
            let var: f64 = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
