//! Physical evaluation statistics of predicted states and flow paths.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynsys::{ChannelRole, Field, Trajectory, RHO_MIN};
use crate::error::{Error, Result};
use crate::fft::{freq, Fft2};
use crate::tensor::Tensor;

/// Density and velocity `(ρ, u_x, u_y)` with `u = m / max(ρ, RHO_MIN)`.
pub fn velocities(f: &Field) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let rho = f.channel(ChannelRole::Density)?;
    let mx = f.channel(ChannelRole::MomentumX)?;
    let my = f.channel(ChannelRole::MomentumY)?;
    let ux = mx.iter().zip(rho).map(|(m, r)| m / r.max(RHO_MIN)).collect();
    let uy = my.iter().zip(rho).map(|(m, r)| m / r.max(RHO_MIN)).collect();
    Ok((rho.to_vec(), ux, uy))
}

fn same_grid(a: &Field, b: &Field) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "fields of {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `⟨½ ρ_real ‖u_real − u‖²⟩`.
pub fn ke_error(real: &Field, pred: &Field) -> Result<f64> {
    same_grid(real, pred)?;
    let (rho, ux, uy) = velocities(real)?;
    let (_, px, py) = velocities(pred)?;
    let s: f64 = (0..rho.len())
        .map(|i| 0.5 * rho[i] * ((ux[i] - px[i]).powi(2) + (uy[i] - py[i]).powi(2)))
        .sum();
    Ok(s / rho.len() as f64)
}

/// Pointwise kinetic energy `½ ρ ‖u‖²`.
pub fn energy_field(f: &Field) -> Result<Vec<f64>> {
    let (rho, ux, uy) = velocities(f)?;
    Ok((0..rho.len()).map(|i| 0.5 * rho[i] * (ux[i] * ux[i] + uy[i] * uy[i])).collect())
}

/// `E = ⟨½ ρ ‖u‖²⟩`.
pub fn kinetic_energy(f: &Field) -> Result<f64> {
    let e = energy_field(f)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumResult {
    pub wavenumbers: Vec<usize>,
    pub energy_density: Vec<f64>,
}

impl SpectrumResult {
    pub fn total(&self) -> f64 {
        self.energy_density.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("k,density\n");
        for (k, d) in self.wavenumbers.iter().zip(&self.energy_density) {
            let _ = writeln!(s, "{k},{d}");
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Isotropic spectrum of `w = √ρ u`: `½|ŵ|² / (HW)²` summed into bins
/// `round(|k|)`, with bins past `min(H, W)/2` folded into the last one.
pub fn energy_spectrum(f: &Field) -> Result<SpectrumResult> {
    let (h, w) = (f.height(), f.width());
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::invalid(format!("spectrum needs power-of-two sizes, got {h}x{w}")));
    }
    let (rho, ux, uy) = velocities(f)?;
    let k_max = h.min(w) / 2;
    let mut bins = vec![0.0; k_max + 1];
    let fft = Fft2::new(h, w);
    let n2 = ((h * w) as f64).powi(2);
    for u in [&ux, &uy] {
        let comp: Vec<f64> = rho.iter().zip(u.iter()).map(|(r, v)| r.max(0.0).sqrt() * v).collect();
        let hat = fft.forward_real(&comp);
        for i in 0..h {
            for j in 0..w {
                let (ky, kx) = (freq(i, h) as f64, freq(j, w) as f64);
                let k = ((kx * kx + ky * ky).sqrt().round() as usize).min(k_max);
                bins[k] += 0.5 * hat[i * w + j].norm_sqr() / n2;
            }
        }
    }
    Ok(SpectrumResult { wavenumbers: (0..=k_max).collect(), energy_density: bins })
}

/// Boundary handling of the discrete Laplacian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Wrap in both directions.
    Periodic,
    /// Replicate the top and bottom rows; wrap columns.
    ClampedRows,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Boundary::Periodic),
            "clamped_rows" => Ok(Boundary::ClampedRows),
            _ => Err(Error::invalid(format!("unknown boundary `{s}`"))),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Boundary::Periodic => "periodic",
            Boundary::ClampedRows => "clamped_rows",
        })
    }
}

/// Mean of the squared 5-point Laplacian of a row-major `h x w` grid.
pub fn squared_laplacian_mean(e: &[f64], h: usize, w: usize, boundary: Boundary) -> f64 {
    let at = |i: isize, j: isize| {
        let i = match boundary {
            Boundary::Periodic => i.rem_euclid(h as isize),
            Boundary::ClampedRows => i.clamp(0, h as isize - 1),
        } as usize;
        let j = j.rem_euclid(w as isize) as usize;
        e[i * w + j]
    };
    let mut s = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let lap = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j);
            s += lap * lap;
        }
    }
    s / (h * w) as f64
}

/// `⟨(Δe)²⟩` of the pointwise kinetic energy.
pub fn sharpness(f: &Field, boundary: Boundary) -> Result<f64> {
    Ok(squared_laplacian_mean(&energy_field(f)?, f.height(), f.width(), boundary))
}

/// Mean over path segments of `‖Δx/Δt − (x_end − x_start)/(t_end − t_start)‖²`.
pub fn straightness(path: &[(f64, Tensor)]) -> Result<f64> {
    if path.len() < 3 {
        return Err(Error::invalid(format!("straightness needs at least 3 points, got {}", path.len())));
    }
    let (t0, x0) = &path[0];
    let (t1, x1) = &path[path.len() - 1];
    let chord = x1.sub(x0)?.scale(1.0 / (t1 - t0));
    let mut total = 0.0;
    for seg in path.windows(2) {
        let v = seg[1].1.sub(&seg[0].1)?.scale(1.0 / (seg[1].0 - seg[0].0));
        total += v.sub(&chord)?.sq_norm();
    }
    Ok(total / (path.len() - 1) as f64)
}

/// One row of the per-step evaluation table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub ke_error: f64,
    pub e_real: f64,
    pub e_pred: f64,
    pub sharp_real: f64,
    pub sharp_pred: f64,
}

pub fn evaluate_rollout(real: &Trajectory, pred: &Trajectory, boundary: Boundary) -> Result<Vec<MetricsRow>> {
    if real.len() != pred.len() {
        return Err(Error::shape(format!("real trajectory has {} states, prediction {}", real.len(), pred.len())));
    }
    real.states
        .iter()
        .zip(&pred.states)
        .enumerate()
        .map(|(step, (r, p))| {
            Ok(MetricsRow {
                step,
                ke_error: ke_error(r, p)?,
                e_real: kinetic_energy(r)?,
                e_pred: kinetic_energy(p)?,
                sharp_real: sharpness(r, boundary)?,
                sharp_pred: sharpness(p, boundary)?,
            })
        })
        .collect()
}

/// Entrywise mean of equally long tables.
pub fn average_tables(tables: &[Vec<MetricsRow>]) -> Result<Vec<MetricsRow>> {
    let first = tables.first().ok_or_else(|| Error::invalid("no tables to average"))?;
    if tables.iter().any(|t| t.len() != first.len()) {
        return Err(Error::shape("tables differ in length"));
    }
    let n = tables.len() as f64;
    Ok((0..first.len())
        .map(|k| {
            let mean = |f: fn(&MetricsRow) -> f64| tables.iter().map(|t| f(&t[k])).sum::<f64>() / n;
            MetricsRow {
                step: first[k].step,
                ke_error: mean(|r| r.ke_error),
                e_real: mean(|r| r.e_real),
                e_pred: mean(|r| r.e_pred),
                sharp_real: mean(|r| r.sharp_real),
                sharp_pred: mean(|r| r.sharp_pred),
            }
        })
        .collect())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,ke_error,E_real,E_pred,sharp_real,sharp_pred\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.ke_error, r.e_real, r.e_pred, r.sharp_real, r.sharp_pred);
    }
    s
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,ke_error,E_real,E_pred,sharp_real,sharp_pred") {
        return Err(Error::Format("unexpected metrics CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            if v.len() != 6 {
                return Err(Error::Format(format!("metrics row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("`{s}`: {e}")));
            Ok(MetricsRow {
                step: v[0].parse().map_err(|e| Error::Format(format!("`{}`: {e}", v[0])))?,
                ke_error: num(v[1])?,
                e_real: num(v[2])?,
                e_pred: num(v[3])?,
                sharp_real: num(v[4])?,
                sharp_pred: num(v[5])?,
            })
        })
        .collect()
}
