//! Thin multi-dimensional wrappers around `rustfft`.
//!
//! Buffers are row-major with the first axis fastest, matching the volume and
//! detector layouts used elsewhere. Inverse transforms are normalized.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

fn transform_axis(data: &mut [Complex64], shape: &[usize], axis: usize, dir: Direction, planner: &mut FftPlanner<f64>) {
    let n = shape[axis];
    if n <= 1 {
        return;
    }
    let fft = match dir {
        Direction::Forward => planner.plan_fft_forward(n),
        Direction::Inverse => planner.plan_fft_inverse(n),
    };
    let stride: usize = shape[..axis].iter().product();
    let total: usize = shape.iter().product();
    let block = stride * n;
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for outer in (0..total).step_by(block) {
        for inner in 0..stride {
            let base = outer + inner;
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = data[base + k * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, v) in line.iter().enumerate() {
                data[base + k * stride] = *v;
            }
        }
    }
}

/// In-place N-dimensional DFT; `shape[0]` is the fastest axis.
pub fn fftn(data: &mut [Complex64], shape: &[usize], dir: Direction) {
    debug_assert_eq!(data.len(), shape.iter().product::<usize>());
    let mut planner = FftPlanner::new();
    for axis in 0..shape.len() {
        transform_axis(data, shape, axis, dir, &mut planner);
    }
    if dir == Direction::Inverse {
        let scale = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

pub fn to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

pub fn real_part(values: &[Complex64]) -> Vec<f64> {
    values.iter().map(|v| v.re).collect()
}

/// Signed DFT frequency index for bin `i` of an `n`-point transform.
#[inline]
pub fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}
