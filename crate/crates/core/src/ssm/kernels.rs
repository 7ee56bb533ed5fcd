//! Diagonal linear-recurrence kernels.
//!
//! Both kernels solve `x_t = a_t ⊙ x_{t-1} + b_t` over `lanes` independent
//! channels, with time-major storage (`[steps × lanes]`, row-major). The
//! parallel kernel uses the associative composition
//! `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)` with a Blelloch up/down sweep.

use rayon::prelude::*;

use crate::tensor::Real;

/// Which recurrence kernel evaluates a scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

impl ScanKernel {
    pub fn name(self) -> &'static str {
        match self {
            ScanKernel::Sequential => "sequential",
            ScanKernel::Parallel => "parallel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential" | "seq" => Some(ScanKernel::Sequential),
            "parallel" | "par" => Some(ScanKernel::Parallel),
            _ => None,
        }
    }

    pub fn run<T: Real>(self, decay: &[T], input: &[T], x0: &[T], lanes: usize) -> Vec<T> {
        match self {
            ScanKernel::Sequential => scan_lanes_sequential(decay, input, x0, lanes),
            ScanKernel::Parallel => scan_lanes_blelloch(decay, input, x0, lanes),
        }
    }
}

pub fn scan_lanes_sequential<T: Real>(decay: &[T], input: &[T], x0: &[T], lanes: usize) -> Vec<T> {
    assert_eq!(decay.len(), input.len());
    assert_eq!(x0.len(), lanes);
    let mut states = vec![T::zero(); input.len()];
    let mut prev = x0.to_vec();
    for ((a, b), x) in decay
        .chunks_exact(lanes)
        .zip(input.chunks_exact(lanes))
        .zip(states.chunks_exact_mut(lanes))
    {
        for l in 0..lanes {
            prev[l] = a[l] * prev[l] + b[l];
        }
        x.copy_from_slice(&prev);
    }
    states
}

// Below this many lane-updates per sweep level the rayon split costs more
// than it saves.
const PARALLEL_GRAIN: usize = 1 << 15;

pub fn scan_lanes_blelloch<T: Real>(decay: &[T], input: &[T], x0: &[T], lanes: usize) -> Vec<T> {
    assert_eq!(decay.len(), input.len());
    assert_eq!(x0.len(), lanes);
    let steps = input.len() / lanes.max(1);
    if steps == 0 {
        return Vec::new();
    }
    let padded = steps.next_power_of_two();
    let mut a = vec![T::one(); padded * lanes];
    let mut b = vec![T::zero(); padded * lanes];
    a[..decay.len()].copy_from_slice(decay);
    b[..input.len()].copy_from_slice(input);

    // Up-sweep: each right child absorbs its left sibling's composition.
    let mut d = 1;
    while d < padded {
        sweep_level(&mut a, &mut b, lanes, d, |a, b, left, right| {
            for l in 0..lanes {
                b[right + l] = a[right + l] * b[left + l] + b[right + l];
                a[right + l] = a[right + l] * a[left + l];
            }
        });
        d *= 2;
    }

    // Down-sweep to an exclusive prefix.
    let root = (padded - 1) * lanes;
    a[root..root + lanes].fill(T::one());
    b[root..root + lanes].fill(T::zero());
    let mut d = padded / 2;
    while d >= 1 {
        sweep_level(&mut a, &mut b, lanes, d, |a, b, left, right| {
            for l in 0..lanes {
                let (la, lb) = (a[left + l], b[left + l]);
                let (pa, pb) = (a[right + l], b[right + l]);
                a[left + l] = pa;
                b[left + l] = pb;
                a[right + l] = la * pa;
                b[right + l] = la * pb + lb;
            }
        });
        d /= 2;
    }

    // Exclusive prefix (P, Q) gives x_{t-1} = P x0 + Q; fold in step t.
    let mut states = vec![T::zero(); steps * lanes];
    let finish = |(t, x): (usize, &mut [T])| {
        let row = t * lanes;
        for l in 0..lanes {
            let prev = a[row + l] * x0[l] + b[row + l];
            x[l] = decay[row + l] * prev + input[row + l];
        }
    };
    if steps * lanes >= PARALLEL_GRAIN {
        states.par_chunks_mut(lanes).enumerate().for_each(finish);
    } else {
        states.chunks_mut(lanes).enumerate().for_each(finish);
    }
    states
}

/// Applies `combine(a_block, b_block, left_offset, right_offset)` to every
/// block of `2d` consecutive steps, where left/right are the flat offsets of
/// the block's steps `d-1` and `2d-1` relative to the block start.
fn sweep_level<T: Real>(
    a: &mut [T],
    b: &mut [T],
    lanes: usize,
    d: usize,
    combine: impl Fn(&mut [T], &mut [T], usize, usize) + Sync,
) {
    let block = 2 * d * lanes;
    let left = (d - 1) * lanes;
    let right = (2 * d - 1) * lanes;
    if a.len() >= PARALLEL_GRAIN && a.len() / block >= 2 {
        a.par_chunks_mut(block)
            .zip(b.par_chunks_mut(block))
            .for_each(|(ab, bb)| combine(ab, bb, left, right));
    } else {
        for (ab, bb) in a.chunks_mut(block).zip(b.chunks_mut(block)) {
            combine(ab, bb, left, right);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prefix_sums_with_unit_decay() {
        let ones = vec![1.0f64; 8];
        let seq = scan_lanes_sequential(&ones, &ones, &[0.0], 1);
        let par = scan_lanes_blelloch(&ones, &ones, &[0.0], 1);
        let expected: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(seq, expected);
        assert_eq!(par, expected);
    }

    #[test]
    fn kernels_agree_on_awkward_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for steps in [1usize, 2, 3, 5, 17, 100, 257] {
            let lanes = 3;
            let a: Vec<f64> = (0..steps * lanes)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            let b: Vec<f64> = (0..steps * lanes)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let x0 = vec![0.3, -0.2, 0.9];
            let seq = scan_lanes_sequential(&a, &b, &x0, lanes);
            let par = scan_lanes_blelloch(&a, &b, &x0, lanes);
            let err = seq
                .iter()
                .zip(&par)
                .map(|(s, p)| (s - p).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "steps={steps} err={err}");
        }
    }

    #[test]
    fn large_parallel_path_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (steps, lanes) = (3000, 16);
        let a: Vec<f32> = (0..steps * lanes)
            .map(|_| rng.gen_range(0.5..1.0))
            .collect();
        let b: Vec<f32> = (0..steps * lanes)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let x0 = vec![0.0; lanes];
        let seq = scan_lanes_sequential(&a, &b, &x0, lanes);
        let par = scan_lanes_blelloch(&a, &b, &x0, lanes);
        let err = seq
            .iter()
            .zip(&par)
            .map(|(s, p)| (s - p).abs())
            .fold(0.0, f32::max);
        assert!(err < 1e-4, "err={err}");
    }
}
