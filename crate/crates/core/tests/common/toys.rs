//! Analytic toy distributions shared by the training tests.
#![allow(dead_code)]

use flowcast::flowmatch::SampledSource;
use flowcast::nn::{Architecture, MlpSpec, OptimSettings, VelocityModel};
use flowcast::{rng_from_seed, FlowRng, Tensor};
use rand::Rng;

pub type Draw = fn(&mut FlowRng) -> (Option<Tensor>, Tensor);

pub fn vec2(a: f64, b: f64) -> Tensor {
    Tensor::new(vec![2], vec![a, b]).unwrap()
}

fn sign(rng: &mut FlowRng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// `+1` or `-1` in both entries with equal probability.
pub fn bimodal() -> SampledSource<Draw> {
    SampledSource(|rng| {
        let s = sign(rng);
        (None, vec2(s, s))
    })
}

pub const POINT_MASS: [f64; 2] = [1.5, -0.5];

pub fn point_mass() -> SampledSource<Draw> {
    SampledSource(|_| (None, vec2(POINT_MASS[0], POINT_MASS[1])))
}

pub const GAUSS_MEAN: [f64; 2] = [1.0, -1.0];
pub const GAUSS_VAR: [f64; 2] = [0.5, 2.0];

/// Anisotropic Gaussian with diagonal covariance.
pub fn gaussian() -> SampledSource<Draw> {
    SampledSource(|rng| {
        let z = Tensor::randn(&[2], rng);
        let d = z.data();
        (None, vec2(GAUSS_MEAN[0] + GAUSS_VAR[0].sqrt() * d[0], GAUSS_MEAN[1] + GAUSS_VAR[1].sqrt() * d[1]))
    })
}

/// Two well separated Gaussian blobs at `(±2, 0)`.
pub fn mixture() -> SampledSource<Draw> {
    SampledSource(|rng| {
        let s = sign(rng);
        let z = Tensor::randn(&[2], rng);
        (None, vec2(2.0 * s + 0.3 * z.data()[0], 0.3 * z.data()[1]))
    })
}

/// Scalar transition `y' = y + s` with `s = ±1`, `y ~ U(-2, 2)`.
pub fn coin_step() -> SampledSource<Draw> {
    SampledSource(|rng| {
        let y = rng.random_range(-2.0..2.0);
        let s = sign(rng);
        (Some(Tensor::new(vec![1], vec![y]).unwrap()), Tensor::new(vec![1], vec![y + s]).unwrap())
    })
}

pub fn mlp(dim: usize, cond: usize, seed: u64) -> VelocityModel {
    let mut rng = rng_from_seed(seed);
    VelocityModel::init(Architecture::Mlp(MlpSpec::new(dim, cond, dim, vec![64, 64])), &mut rng).unwrap()
}

pub fn toy_settings(steps: usize, lr: f64) -> OptimSettings {
    OptimSettings { record_wall_time: false, ..OptimSettings::new(steps, lr, 128).with_decay(0.1) }
}

/// Per-coordinate sample means and unbiased variances of `[n, 2]` rows,
/// plus the covariance.
pub fn moments(x: &Tensor) -> ([f64; 2], [f64; 2], f64) {
    let n = x.shape()[0];
    let d = x.data();
    let mean = [0, 1].map(|j| (0..n).map(|i| d[2 * i + j]).sum::<f64>() / n as f64);
    let var = [0, 1].map(|j| (0..n).map(|i| (d[2 * i + j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64);
    let cov = (0..n).map(|i| (d[2 * i] - mean[0]) * (d[2 * i + 1] - mean[1])).sum::<f64>() / (n - 1) as f64;
    (mean, var, cov)
}

/// Fraction of rows within `radius` of `±(1, 1)` and fraction nearer `+(1, 1)`.
pub fn mode_stats(x: &Tensor, radius: f64) -> (f64, f64) {
    let n = x.shape()[0];
    let d = x.data();
    let (mut near, mut plus) = (0usize, 0usize);
    for i in 0..n {
        let (a, b) = (d[2 * i], d[2 * i + 1]);
        let s = if a + b > 0.0 { 1.0 } else { -1.0 };
        if s > 0.0 {
            plus += 1;
        }
        if ((a - s).powi(2) + (b - s).powi(2)).sqrt() <= radius {
            near += 1;
        }
    }
    (near as f64 / n as f64, plus as f64 / n as f64)
}
