//! In-place multi-dimensional FFT on row-major complex arrays.

use num_complex::Complex64;
use std::sync::Arc;

use rustfft::{Fft, FftDirection, FftPlanner};

/// Planned transform along every axis of a fixed row-major shape.
#[derive(Clone)]
pub struct FftNd {
    shape: Vec<usize>,
    plans: Vec<Option<Arc<dyn Fft<f64>>>>,
    line: Vec<Complex64>,
}

impl FftNd {
    pub fn new(shape: &[usize], direction: FftDirection) -> Self {
        let mut planner = FftPlanner::new();
        let plans = shape
            .iter()
            .map(|&len| (len > 1).then(|| planner.plan_fft(len, direction)))
            .collect();
        let longest = shape.iter().copied().max().unwrap_or(1);
        FftNd { shape: shape.to_vec(), plans, line: vec![Complex64::new(0.0, 0.0); longest] }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unnormalized in-place transform.
    pub fn process(&mut self, data: &mut [Complex64]) {
        let total = self.len();
        assert_eq!(data.len(), total, "buffer does not match shape");
        let mut stride = total;
        for (axis, &len) in self.shape.iter().enumerate() {
            stride /= len;
            let Some(fft) = &self.plans[axis] else { continue };
            if stride == 1 {
                fft.process(data);
                continue;
            }
            let line = &mut self.line[..len];
            let block = len * stride;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = data[base + i * stride];
                    }
                    fft.process(line);
                    for (i, v) in line.iter().enumerate() {
                        data[base + i * stride] = *v;
                    }
                }
            }
        }
    }
}

/// Unnormalized transform along every axis of `shape`.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], direction: FftDirection) {
    FftNd::new(shape, direction).process(data);
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn matches_direct_dft_2d() {
        let shape = [4, 6];
        let data: Vec<Complex64> =
            (0..24).map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64).cos())).collect();
        let mut fast = data.clone();
        fft_nd(&mut fast, &shape, FftDirection::Forward);
        for k0 in 0..4 {
            for k1 in 0..6 {
                let mut acc = Complex64::new(0.0, 0.0);
                for x0 in 0..4 {
                    for x1 in 0..6 {
                        let ph = -2.0 * PI * ((k0 * x0) as f64 / 4.0 + (k1 * x1) as f64 / 6.0);
                        acc += data[x0 * 6 + x1] * Complex64::from_polar(1.0, ph);
                    }
                }
                assert!((acc - fast[k0 * 6 + k1]).norm() < 1e-12);
            }
        }
    }
}
