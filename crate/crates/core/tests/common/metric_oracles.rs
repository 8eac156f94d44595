//! Brute-force references for the field statistics, written against
//! nested arrays rather than the flat channel layout.
#![allow(dead_code)]

use flowcast::dynsys::{Field, PHYSICAL_ROLES};
use flowcast::{FlowRng, Tensor};

pub type Grid = Vec<Vec<f64>>;

pub fn random_field(h: usize, w: usize, rng: &mut FlowRng) -> Field {
    let mut t = Tensor::uniform(&[3, h, w], -1.0, 1.0, rng);
    for v in &mut t.data_mut()[..h * w] {
        *v = 0.2 + 1.8 * v.abs();
    }
    Field::new(t, PHYSICAL_ROLES.to_vec(), 0.0).unwrap()
}

/// `(ρ, u_x, u_y)` as `[row][col]` grids.
pub fn split(f: &Field) -> (Grid, Grid, Grid) {
    let (h, w) = (f.height(), f.width());
    let d = f.channels.data();
    let grid = |c: usize| -> Grid { (0..h).map(|i| (0..w).map(|j| d[c * h * w + i * w + j]).collect()).collect() };
    let rho = grid(0);
    let (mx, my) = (grid(1), grid(2));
    let div = |m: &Grid| -> Grid { (0..h).map(|i| (0..w).map(|j| m[i][j] / rho[i][j]).collect()).collect() };
    let (ux, uy) = (div(&mx), div(&my));
    (rho, ux, uy)
}

pub fn kinetic_energy(f: &Field) -> f64 {
    let (rho, ux, uy) = split(f);
    let mut s = 0.0;
    for i in 0..rho.len() {
        for j in 0..rho[0].len() {
            s += 0.5 * rho[i][j] * (ux[i][j] * ux[i][j] + uy[i][j] * uy[i][j]);
        }
    }
    s / (rho.len() * rho[0].len()) as f64
}

pub fn ke_error(real: &Field, pred: &Field) -> f64 {
    let (rho, ux, uy) = split(real);
    let (_, px, py) = split(pred);
    let mut s = 0.0;
    for i in 0..rho.len() {
        for j in 0..rho[0].len() {
            let dx = ux[i][j] - px[i][j];
            let dy = uy[i][j] - py[i][j];
            s += 0.5 * rho[i][j] * (dx * dx + dy * dy);
        }
    }
    s / (rho.len() * rho[0].len()) as f64
}

/// Periodic 5-point Laplacian of the pointwise energy, squared and averaged.
pub fn sharpness_periodic(f: &Field) -> f64 {
    let (rho, ux, uy) = split(f);
    let (h, w) = (rho.len(), rho[0].len());
    let e: Grid = (0..h)
        .map(|i| (0..w).map(|j| 0.5 * rho[i][j] * (ux[i][j].powi(2) + uy[i][j].powi(2))).collect())
        .collect();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            let lap = e[(i + h - 1) % h][j] + e[(i + 1) % h][j] + e[i][(j + w - 1) % w] + e[i][(j + 1) % w] - 4.0 * e[i][j];
            s += lap * lap;
        }
    }
    s / (h * w) as f64
}

/// Radially binned spectrum from a direct double-sum DFT.
pub fn spectrum(f: &Field) -> Vec<f64> {
    let (rho, ux, uy) = split(f);
    let (h, w) = (rho.len(), rho[0].len());
    let k_max = h.min(w) / 2;
    let mut bins = vec![0.0; k_max + 1];
    let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for u in [&ux, &uy] {
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        let a = rho[i][j].sqrt() * u[i][j];
                        let ph = -2.0 * std::f64::consts::PI * (ky as f64 * i as f64 / h as f64 + kx as f64 * j as f64 / w as f64);
                        re += a * ph.cos();
                        im += a * ph.sin();
                    }
                }
                let k = (signed(kx, w).hypot(signed(ky, h)).round() as usize).min(k_max);
                bins[k] += 0.5 * (re * re + im * im) / ((h * w) as f64).powi(2);
            }
        }
    }
    bins
}
