//! Two-dimensional FFT on row-major `h x w` grids, built from rustfft plans.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn apply(&self, data: &mut [Complex64], rows: &dyn Fft<f64>, cols: &dyn Fft<f64>) {
        let (h, w) = (self.h, self.w);
        rows.process(data);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                t[j * h + i] = data[i * w + j];
            }
        }
        cols.process(&mut t);
        for i in 0..h {
            for j in 0..w {
                data[i * w + j] = t[j * h + i];
            }
        }
    }

    /// Unnormalized forward transform.
    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.apply(data, self.row_fwd.as_ref(), self.col_fwd.as_ref());
    }

    /// Inverse transform scaled by `1 / (h w)`.
    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.apply(data, self.row_inv.as_ref(), self.col_inv.as_ref());
        let s = 1.0 / (self.h * self.w) as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    pub(crate) fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut c);
        c
    }

    pub(crate) fn inverse_real(&self, data: &[Complex64]) -> Vec<f64> {
        let mut c = data.to_vec();
        self.inverse(&mut c);
        c.into_iter().map(|z| z.re).collect()
    }
}

/// Signed integer frequency of DFT index `j` on `n` points.
pub(crate) fn freq(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}
