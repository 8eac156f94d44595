//! Pseudo-spectral vorticity solver on a doubly periodic box with an
//! advected scalar, optional buoyancy coupling and random forcing.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{freq, Fft2};
use crate::FlowRng;

/// Physical constants of the vorticity / scalar system
/// `ω_t + u·∇ω = ν Δω + β ∂_x s + f`, `s_t + u·∇s = κ Δs`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub viscosity: f64,
    pub diffusivity: f64,
    pub buoyancy: f64,
    /// Amplitude of the random vorticity forcing, scaled by `√dt` per substep.
    pub forcing: f64,
    pub dt: f64,
    /// Largest allowed `max(|u| + |v|) dt / dx`.
    pub cfl_max: f64,
}

pub struct SpectralSim {
    pub ny: usize,
    pub nx: usize,
    pub params: SimParams,
    fft: Fft2,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    mask: Vec<bool>,
    omega: Vec<Complex64>,
    scalar: Vec<Complex64>,
}

impl SpectralSim {
    /// Box of height `2π` with square cells; `omega` and `scalar` are
    /// row-major physical fields.
    pub fn new(ny: usize, nx: usize, params: SimParams, omega: &[f64], scalar: &[f64]) -> Result<Self> {
        if ny < 4 || nx < 4 || omega.len() != ny * nx || scalar.len() != ny * nx {
            return Err(Error::shape(format!("simulation grid {ny}x{nx} does not match the initial fields")));
        }
        let fft = Fft2::new(ny, nx);
        let dk = 1.0; // 2π / L with L = 2π for y; x shares the cell size.
        let mut kx = vec![0.0; ny * nx];
        let mut ky = vec![0.0; ny * nx];
        let mut k2 = vec![0.0; ny * nx];
        let mut mask = vec![false; ny * nx];
        for i in 0..ny {
            for j in 0..nx {
                let fy = freq(i, ny);
                let fx = freq(j, nx);
                let idx = i * nx + j;
                ky[idx] = dk * fy as f64;
                kx[idx] = dk * fx as f64 * ny as f64 / nx as f64;
                k2[idx] = kx[idx] * kx[idx] + ky[idx] * ky[idx];
                mask[idx] = 3 * fy.unsigned_abs() < ny as u64 && 3 * fx.unsigned_abs() < nx as u64;
            }
        }
        let mut sim = SpectralSim {
            ny,
            nx,
            params,
            fft,
            kx,
            ky,
            k2,
            mask,
            omega: Vec::new(),
            scalar: Vec::new(),
        };
        sim.omega = sim.filtered(omega);
        sim.scalar = sim.filtered(scalar);
        Ok(sim)
    }

    fn filtered(&self, x: &[f64]) -> Vec<Complex64> {
        let mut c = self.fft.forward_real(x);
        for (v, &m) in c.iter_mut().zip(&self.mask) {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        c
    }

    pub fn dx(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.ny as f64
    }

    fn derivative(&self, hat: &[Complex64], k: &[f64]) -> Vec<f64> {
        let d: Vec<Complex64> = hat.iter().zip(k).map(|(v, &k)| v * Complex64::new(0.0, k)).collect();
        self.fft.inverse_real(&d)
    }

    fn velocity_hat(&self, omega: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut u = Vec::with_capacity(omega.len());
        let mut v = Vec::with_capacity(omega.len());
        for (i, w) in omega.iter().enumerate() {
            let psi = if self.k2[i] > 0.0 { w / self.k2[i] } else { Complex64::new(0.0, 0.0) };
            u.push(psi * Complex64::new(0.0, self.ky[i]));
            v.push(psi * Complex64::new(0.0, -self.kx[i]));
        }
        (u, v)
    }

    /// Velocity components `(u, v)` in physical space.
    pub fn velocity(&self) -> (Vec<f64>, Vec<f64>) {
        let (u, v) = self.velocity_hat(&self.omega);
        (self.fft.inverse_real(&u), self.fft.inverse_real(&v))
    }

    pub fn scalar(&self) -> Vec<f64> {
        self.fft.inverse_real(&self.scalar)
    }

    pub fn vorticity(&self) -> Vec<f64> {
        self.fft.inverse_real(&self.omega)
    }

    /// Replace the scalar field, e.g. to build twins with different hidden state.
    pub fn set_scalar(&mut self, s: &[f64]) {
        self.scalar = self.filtered(s);
    }

    /// Advective tendencies of vorticity and scalar, dealiased.
    fn tendencies(&self, omega: &[Complex64], scalar: &[Complex64]) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let (uh, vh) = self.velocity_hat(omega);
        let u = self.fft.inverse_real(&uh);
        let v = self.fft.inverse_real(&vh);
        let cfl = u.iter().zip(&v).map(|(a, b)| a.abs() + b.abs()).fold(0.0, f64::max) * self.params.dt / self.dx();
        if !cfl.is_finite() || cfl > self.params.cfl_max {
            return Err(Error::Unstable(format!("CFL number {cfl:.3} exceeds {}", self.params.cfl_max)));
        }
        let advect = |hat: &[Complex64]| {
            let dx = self.derivative(hat, &self.kx);
            let dy = self.derivative(hat, &self.ky);
            let adv: Vec<f64> = (0..u.len()).map(|i| -(u[i] * dx[i] + v[i] * dy[i])).collect();
            self.fft.forward_real(&adv)
        };
        let mut dw = advect(omega);
        let mut ds = advect(scalar);
        let beta = self.params.buoyancy;
        for i in 0..dw.len() {
            if beta != 0.0 {
                dw[i] += beta * scalar[i] * Complex64::new(0.0, self.kx[i]);
            }
            if !self.mask[i] {
                dw[i] = Complex64::new(0.0, 0.0);
                ds[i] = Complex64::new(0.0, 0.0);
            }
        }
        Ok((dw, ds))
    }

    /// One integrating-factor Heun step, then forcing.
    pub fn step(&mut self, rng: &mut FlowRng) -> Result<()> {
        let dt = self.params.dt;
        let ew: Vec<f64> = self.k2.iter().map(|k| (-self.params.viscosity * k * dt).exp()).collect();
        let es: Vec<f64> = self.k2.iter().map(|k| (-self.params.diffusivity * k * dt).exp()).collect();
        let (aw, as_) = self.tendencies(&self.omega, &self.scalar)?;
        let n = self.omega.len();
        let w1: Vec<Complex64> = (0..n).map(|i| ew[i] * (self.omega[i] + dt * aw[i])).collect();
        let s1: Vec<Complex64> = (0..n).map(|i| es[i] * (self.scalar[i] + dt * as_[i])).collect();
        let (bw, bs) = self.tendencies(&w1, &s1)?;
        for i in 0..n {
            self.omega[i] = ew[i] * self.omega[i] + 0.5 * dt * (ew[i] * aw[i] + bw[i]);
            self.scalar[i] = es[i] * self.scalar[i] + 0.5 * dt * (es[i] * as_[i] + bs[i]);
        }
        if self.params.forcing > 0.0 {
            let f = forcing_field(self.ny, self.nx, rng);
            let fh = self.filtered(&f);
            let a = self.params.forcing * dt.sqrt();
            for i in 0..n {
                self.omega[i] += a * fh[i];
            }
        }
        if self.omega.iter().chain(&self.scalar).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Unstable("non-finite spectral state".into()));
        }
        Ok(())
    }
}

/// Random vorticity pattern made of the wavenumbers `1 <= |k| <= 3`, each
/// with standard normal cosine and sine amplitudes.
fn forcing_field(ny: usize, nx: usize, rng: &mut FlowRng) -> Vec<f64> {
    let mut out = vec![0.0; ny * nx];
    let two_pi = 2.0 * std::f64::consts::PI;
    for ky in 0..=3i64 {
        for kx in -3..=3i64 {
            let k2 = kx * kx + ky * ky;
            if k2 == 0 || k2 > 9 || (ky == 0 && kx < 0) {
                continue;
            }
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            for i in 0..ny {
                for j in 0..nx {
                    let ph = two_pi * (ky as f64 * i as f64 / ny as f64 + kx as f64 * j as f64 / nx as f64);
                    out[i * nx + j] += a * ph.cos() + b * ph.sin();
                }
            }
        }
    }
    out
}

/// Smooth random field: white noise filtered by `k exp(-(k/k0)^2)`, scaled to
/// unit root-mean-square.
pub(crate) fn smooth_random(ny: usize, nx: usize, k0: f64, rng: &mut FlowRng) -> Vec<f64> {
    let fft = Fft2::new(ny, nx);
    let noise: Vec<f64> = (0..ny * nx).map(|_| StandardNormal.sample(rng)).collect();
    let mut c = fft.forward_real(&noise);
    for i in 0..ny {
        for j in 0..nx {
            let ky = freq(i, ny) as f64;
            let kx = freq(j, nx) as f64 * ny as f64 / nx as f64;
            let k = (kx * kx + ky * ky).sqrt();
            c[i * nx + j] *= k * (-(k / k0).powi(2)).exp();
        }
    }
    let mut x = fft.inverse_real(&c);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        for v in &mut x {
            *v /= rms;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn params() -> SimParams {
        SimParams { viscosity: 0.01, diffusivity: 0.01, buoyancy: 0.0, forcing: 0.0, dt: 0.01, cfl_max: 1.0 }
    }

    #[test]
    fn taylor_green_decays_at_the_viscous_rate() {
        // ω = 2 sin x sin y is a steady Euler solution; only viscosity acts.
        let n = 16;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = 2.0 * (j as f64 * h).sin() * (i as f64 * h).sin();
            }
        }
        let mut sim = SpectralSim::new(n, n, params(), &w, &vec![0.0; n * n]).unwrap();
        let mut rng = rng_from_seed(0);
        for _ in 0..100 {
            sim.step(&mut rng).unwrap();
        }
        let expect = (-2.0 * 0.01 * 1.0f64).exp();
        let got = sim.vorticity();
        for (a, b) in got.iter().zip(&w) {
            assert!((a - expect * b).abs() < 1e-10);
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let n = 16;
        let mut rng = rng_from_seed(1);
        let w: Vec<f64> = smooth_random(n, n, 3.0, &mut rng).iter().map(|v| 100.0 * v).collect();
        let mut p = params();
        p.dt = 0.5;
        let mut sim = SpectralSim::new(n, n, p, &w, &vec![0.0; n * n]).unwrap();
        assert!(matches!(sim.step(&mut rng), Err(Error::Unstable(_))));
    }
}
