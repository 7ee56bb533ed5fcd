//! Value-level state-space scans: the literal recurrence
//! `x_t = Ā x_{t−1} + B̄ u_t`, `y_t = C̄ x_t + D̄ u_t`, and the per-step
//! selective parameterisation.

use crate::error::{Error, Result};
use crate::ops::softplus;
use crate::ssm::kernels::{scan_lanes_blelloch, scan_lanes_sequential};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix<T> {
    Diagonal(Vec<T>),
    Dense(Tensor<T>),
}

impl<T: Real> StateMatrix<T> {
    pub fn state_size(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Dense(m) => m.shape()[0],
        }
    }

    /// Gelfand estimate `‖A^64‖_F^{1/64}` (exact for diagonal matrices).
    pub fn spectral_radius(&self) -> f64 {
        match self {
            StateMatrix::Diagonal(d) => d.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max),
            StateMatrix::Dense(m) => {
                let n = m.shape()[0];
                let mut p: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
                let mut log_scale = 0.0;
                for _ in 0..6 {
                    let mut sq = vec![0.0; n * n];
                    for i in 0..n {
                        for k in 0..n {
                            let a = p[i * n + k];
                            for j in 0..n {
                                sq[i * n + j] += a * p[k * n + j];
                            }
                        }
                    }
                    let norm = sq.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return 0.0;
                    }
                    log_scale = 2.0 * log_scale + norm.ln();
                    p = sq.iter().map(|v| v / norm).collect();
                }
                (log_scale / 64.0).exp()
            }
        }
    }
}

/// Explicit discrete matrices of one scan direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmDirectionParams<T> {
    pub a: StateMatrix<T>,
    /// `N × D_in`
    pub b: Tensor<T>,
    /// `D_out × N`
    pub c: Tensor<T>,
    /// `D_out × D_in`
    pub d: Tensor<T>,
}

impl<T: Real> SsmDirectionParams<T> {
    /// Returns `(state, in, out)` sizes after checking consistency.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let n = self.a.state_size();
        if let StateMatrix::Dense(m) = &self.a {
            if m.shape() != [n, n] {
                return Err(Error::shape(
                    "ssm",
                    format!("Ā must be square, got {:?}", m.shape()),
                ));
            }
        }
        let (bn, din) = self.b.dims2()?;
        let (dout, cn) = self.c.dims2()?;
        let (ddout, ddin) = self.d.dims2()?;
        if bn != n || cn != n || ddout != dout || ddin != din {
            return Err(Error::shape(
                "ssm",
                format!(
                    "inconsistent matrices: Ā {n}, B̄ {:?}, C̄ {:?}, D̄ {:?}",
                    self.b.shape(),
                    self.c.shape(),
                    self.d.shape()
                ),
            ));
        }
        Ok((n, din, dout))
    }

    fn prepare(&self, u: &Tensor<T>, x0: Option<&[T]>) -> Result<(usize, usize, Vec<T>, Vec<T>)> {
        let (n, din, _) = self.dims()?;
        let (steps, ud) = u.dims2()?;
        if ud != din {
            return Err(Error::shape(
                "ssm",
                format!("input has {ud} channels, B̄ expects {din}"),
            ));
        }
        let x0 = x0.map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
        if x0.len() != n {
            return Err(Error::shape(
                "ssm",
                format!("x0 has {} entries, state has {n}", x0.len()),
            ));
        }
        // B̄ u_t for every step
        let mut driven = vec![T::zero(); steps * n];
        for t in 0..steps {
            let ut = u.row(t);
            for i in 0..n {
                driven[t * n + i] = self.b.row(i).iter().zip(ut).map(|(&b, &x)| b * x).sum();
            }
        }
        Ok((steps, n, x0, driven))
    }

    fn readout(&self, u: &Tensor<T>, states: &[T], steps: usize, n: usize) -> Tensor<T> {
        let dout = self.c.shape()[0];
        let mut y = vec![T::zero(); steps * dout];
        for t in 0..steps {
            let xt = &states[t * n..(t + 1) * n];
            let ut = u.row(t);
            for o in 0..dout {
                let cx: T = self.c.row(o).iter().zip(xt).map(|(&c, &x)| c * x).sum();
                let du: T = self.d.row(o).iter().zip(ut).map(|(&d, &x)| d * x).sum();
                y[t * dout + o] = cx + du;
            }
        }
        Tensor::from_parts(vec![steps, dout], y)
    }
}

/// Left-to-right evaluation of the recurrence.
pub fn scan_sequential<T: Real>(
    u: &Tensor<T>,
    p: &SsmDirectionParams<T>,
    x0: Option<&[T]>,
) -> Result<Tensor<T>> {
    let (steps, n, x0, driven) = p.prepare(u, x0)?;
    let states = match &p.a {
        StateMatrix::Diagonal(diag) => {
            let decay = diag.repeat(steps);
            scan_lanes_sequential(&decay, &driven, &x0, n)
        }
        StateMatrix::Dense(a) => {
            let mut states = vec![T::zero(); steps * n];
            let mut prev = x0;
            for t in 0..steps {
                for i in 0..n {
                    let ax: T = a.row(i).iter().zip(&prev).map(|(&a, &x)| a * x).sum();
                    states[t * n + i] = ax + driven[t * n + i];
                }
                prev.copy_from_slice(&states[t * n..(t + 1) * n]);
            }
            states
        }
    };
    Ok(p.readout(u, &states, steps, n))
}

/// Blelloch-scan evaluation; requires a diagonal Ā.
pub fn scan_parallel<T: Real>(
    u: &Tensor<T>,
    p: &SsmDirectionParams<T>,
    x0: Option<&[T]>,
) -> Result<Tensor<T>> {
    let StateMatrix::Diagonal(diag) = &p.a else {
        return Err(Error::UnsupportedMode(
            "parallel scan needs a diagonal state matrix".into(),
        ));
    };
    let (steps, n, x0, driven) = p.prepare(u, x0)?;
    let decay = diag.repeat(steps);
    let states = scan_lanes_blelloch(&decay, &driven, &x0, n);
    Ok(p.readout(u, &states, steps, n))
}

/// Input projections of the selective mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveProjections<T> {
    /// `D × D` (row-vector convention: `Δ = softplus(u·W_Δ + b_Δ)`)
    pub w_delta: Tensor<T>,
    pub b_delta: Tensor<T>,
    /// Continuous-time diagonal, every entry negative; length `N`.
    pub a: Tensor<T>,
    /// `D × N`
    pub w_b: Tensor<T>,
    /// `D × N`
    pub w_c: Tensor<T>,
}

/// Discretised parameters for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveStep<T> {
    /// `Δ_t`, one step size per channel.
    pub delta: Vec<T>,
    /// `Ā_t = exp(Δ_t ⊙ a)` as a `D × N` grid (channel-major).
    pub decay: Tensor<T>,
    /// `B̄_t = Δ_t ⊙ B_t` as a `D × N` grid; the state input is `B̄_t[d,n]·u_t[d]`.
    pub input_gain: Tensor<T>,
    /// `C_t`, length `N`.
    pub c: Vec<T>,
}

pub fn selective_parameters<T: Real>(
    u_t: &[T],
    proj: &SelectiveProjections<T>,
) -> Result<SelectiveStep<T>> {
    let (d, d2) = proj.w_delta.dims2()?;
    let n = proj.a.len();
    if u_t.len() != d || d2 != d || proj.w_b.shape() != [d, n] || proj.w_c.shape() != [d, n] {
        return Err(Error::shape(
            "selective_parameters",
            "projection shapes disagree with the input",
        ));
    }
    let project = |w: &Tensor<T>, cols: usize, j: usize| -> T {
        (0..d).map(|i| u_t[i] * w.data()[i * cols + j]).sum()
    };
    let delta: Vec<T> = (0..d)
        .map(|j| softplus(project(&proj.w_delta, d, j) + proj.b_delta.data()[j]))
        .collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("selective_parameters", "non-finite Δ"));
    }
    let b: Vec<T> = (0..n).map(|j| project(&proj.w_b, n, j)).collect();
    let c: Vec<T> = (0..n).map(|j| project(&proj.w_c, n, j)).collect();
    let decay = Tensor::from_fn(&[d, n], |i| (delta[i / n] * proj.a.data()[i % n]).exp());
    let input_gain = Tensor::from_fn(&[d, n], |i| delta[i / n] * b[i % n]);
    Ok(SelectiveStep {
        delta,
        decay,
        input_gain,
        c,
    })
}

/// Step-by-step selective scan, `y_t[d] = Σ_n C_t[n] X_t[d,n] + skip[d]·u_t[d]`.
pub fn selective_scan_reference<T: Real>(
    u: &Tensor<T>,
    proj: &SelectiveProjections<T>,
    skip: &[T],
) -> Result<Tensor<T>> {
    let (steps, d) = u.dims2()?;
    let n = proj.a.len();
    let mut state = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); steps * d];
    for t in 0..steps {
        let ut = u.row(t);
        let step = selective_parameters(ut, proj)?;
        for dd in 0..d {
            let mut acc = skip[dd] * ut[dd];
            for k in 0..n {
                let i = dd * n + k;
                state[i] = step.decay.data()[i] * state[i] + step.input_gain.data()[i] * ut[dd];
                acc = acc + step.c[k] * state[i];
            }
            y[t * d + dd] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![steps, d], y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(a: f64, b: f64, c: f64, d: f64) -> SsmDirectionParams<f64> {
        SsmDirectionParams {
            a: StateMatrix::Diagonal(vec![a]),
            b: Tensor::full(&[1, 1], b),
            c: Tensor::full(&[1, 1], c),
            d: Tensor::full(&[1, 1], d),
        }
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        let u = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let y = scan_sequential(&u, &scalar_params(0.5, 1.0, 1.0, 0.0), None).unwrap();
        assert_eq!(y.data(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn zero_state_matrix_is_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |s: &[usize]| Tensor::<f64>::from_fn(s, |_| rng.gen_range(-1.0..1.0));
        let p = SsmDirectionParams {
            a: StateMatrix::Dense(Tensor::zeros(&[4, 4])),
            b: r(&[4, 3]),
            c: r(&[2, 4]),
            d: r(&[2, 3]),
        };
        let u = r(&[6, 3]);
        let y = scan_sequential(&u, &p, None).unwrap();
        let cb = crate::ops::matmul(&p.c, &p.b).unwrap();
        for t in 0..6 {
            for o in 0..2 {
                let expect: f64 = (0..3)
                    .map(|i| (cb.at2(o, i) + p.d.at2(o, i)) * u.at2(t, i))
                    .sum();
                assert!((y.at2(t, o) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn passthrough_with_zero_readout() {
        let u = Tensor::from_fn(&[5, 2], |i| i as f64);
        let p = SsmDirectionParams {
            a: StateMatrix::Diagonal(vec![0.9, 0.3]),
            b: Tensor::eye(2),
            c: Tensor::zeros(&[2, 2]),
            d: Tensor::eye(2),
        };
        assert_eq!(scan_sequential(&u, &p, None).unwrap(), u);
        assert_eq!(scan_parallel(&u, &p, None).unwrap(), u);
    }

    #[test]
    fn parallel_rejects_dense() {
        let p = SsmDirectionParams {
            a: StateMatrix::Dense(Tensor::<f64>::eye(2)),
            b: Tensor::eye(2),
            c: Tensor::eye(2),
            d: Tensor::eye(2),
        };
        let err = scan_parallel(&Tensor::ones(&[3, 2]), &p, None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMode(_)));
    }

    #[test]
    fn cumulative_sum_and_single_step() {
        let u = Tensor::<f64>::ones(&[8, 1]);
        let p = scalar_params(1.0, 1.0, 1.0, 0.0);
        let y = scan_parallel(&u, &p, None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let one = Tensor::full(&[1, 1], 0.7);
        let p = scalar_params(0.4, 2.0, 3.0, 0.5);
        let x0 = [1.5];
        let seq = scan_sequential(&one, &p, Some(&x0)).unwrap();
        let par = scan_parallel(&one, &p, Some(&x0)).unwrap();
        assert_eq!(seq, par);
        assert!((seq.data()[0] - (3.0 * (0.4 * 1.5 + 2.0 * 0.7) + 0.5 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn dense_spectral_radius_estimate() {
        // rotation scaled by 0.8 has complex eigenvalues of modulus 0.8
        let (c, s) = (0.8 * 0.3f64.cos(), 0.8 * 0.3f64.sin());
        let m = StateMatrix::Dense(Tensor::new(vec![2, 2], vec![c, -s, s, c]).unwrap());
        assert!((m.spectral_radius() - 0.8).abs() < 1e-2);
        assert_eq!(
            StateMatrix::Diagonal(vec![0.5, -0.9]).spectral_radius(),
            0.9
        );
    }

    fn random_projections(seed: u64, d: usize, n: usize) -> SelectiveProjections<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r =
            |s: &[usize], scale: f64| Tensor::<f64>::from_fn(s, |_| rng.gen_range(-scale..scale));
        SelectiveProjections {
            w_delta: r(&[d, d], 0.5),
            b_delta: r(&[d], 0.5),
            a: Tensor::from_fn(&[n], |i| -(i as f64 + 1.0)),
            w_b: r(&[d, n], 0.5),
            w_c: r(&[d, n], 0.5),
        }
    }

    #[test]
    fn input_independent_delta_limit() {
        let mut proj = random_projections(4, 3, 2);
        proj.w_delta = Tensor::zeros(&[3, 3]);
        proj.b_delta = Tensor::zeros(&[3]);
        for u in [[0.1, -2.0, 3.0], [5.0, 0.0, -1.0]] {
            let step = selective_parameters(&u, &proj).unwrap();
            for &dt in &step.delta {
                assert!((dt - std::f64::consts::LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn very_negative_a_forgets() {
        let mut proj = random_projections(5, 3, 4);
        proj.a = Tensor::full(&[4], -1e9);
        let step = selective_parameters(&[0.3, -0.2, 0.5], &proj).unwrap();
        assert!(step.decay.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_shrinks_as_delta_grows() {
        let mut proj = random_projections(6, 1, 3);
        proj.w_delta = Tensor::zeros(&[1, 1]);
        let mut prev: Option<Vec<f64>> = None;
        for k in 0..=40 {
            let target = 0.1 + k as f64 * (9.9 / 40.0);
            // softplus⁻¹(target)
            proj.b_delta = Tensor::full(&[1], target + (-(-target).exp_m1()).ln());
            let step = selective_parameters(&[1.0], &proj).unwrap();
            assert!((step.delta[0] - target).abs() < 1e-9);
            let decay = step.decay.data().to_vec();
            assert!(decay.iter().all(|&v| v > 0.0 && v < 1.0));
            if let Some(p) = &prev {
                assert!(decay.iter().zip(p).all(|(now, before)| now < before));
            }
            prev = Some(decay);
        }
    }

    #[test]
    fn non_finite_delta_is_reported() {
        let mut proj = random_projections(7, 2, 2);
        proj.b_delta = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            selective_parameters(&[1.0, 1.0], &proj).unwrap_err(),
            Error::Numeric { .. }
        ));
    }
}
