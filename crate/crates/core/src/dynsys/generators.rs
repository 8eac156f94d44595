//! The three synthetic systems: a rigidly rotating density blob, a decaying
//! (optionally forced) 2D flow carrying a density tracer, and a buoyancy
//! driven flow observed only through a narrow column band.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spectral::{smooth_random, SimParams, SpectralSim};
use super::{Field, Trajectory, TrajectoryMeta, PHYSICAL_ROLES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{rng_from_seed, FlowRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    SpectralFlow,
    RotatingBlob,
    SlicedBuoyancy,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::SpectralFlow => "spectral_flow",
            GeneratorKind::RotatingBlob => "rotating_blob",
            GeneratorKind::SlicedBuoyancy => "sliced_buoyancy",
        }
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral_flow" => Ok(GeneratorKind::SpectralFlow),
            "rotating_blob" => Ok(GeneratorKind::RotatingBlob),
            "sliced_buoyancy" => Ok(GeneratorKind::SlicedBuoyancy),
            _ => Err(Error::invalid(format!("unknown generator `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Observed grid height and width.
    pub height: usize,
    pub width: usize,
    pub noise_scale: f64,
    pub inner_substeps: usize,
    pub viscosity: f64,
    pub dt_sim: f64,
    /// Rotation per observed step of `rotating_blob`, in radians.
    pub angle_per_step: f64,
    /// Ratio of simulated to observed width for `sliced_buoyancy`.
    pub hidden_factor: usize,
    /// Amplitude of density variations carried by the tracer.
    pub density_contrast: f64,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        let base = GeneratorSpec {
            kind,
            height: 32,
            width: 32,
            noise_scale: 0.0,
            inner_substeps: 10,
            viscosity: 2e-3,
            dt_sim: 0.1,
            angle_per_step: std::f64::consts::PI / 16.0,
            hidden_factor: 4,
            density_contrast: 0.1,
        };
        match kind {
            GeneratorKind::RotatingBlob => GeneratorSpec { inner_substeps: 1, viscosity: 0.0, ..base },
            GeneratorKind::SpectralFlow => base,
            GeneratorKind::SlicedBuoyancy => GeneratorSpec { viscosity: 5e-3, dt_sim: 0.2, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize| n >= 4 && n.is_power_of_two();
        if !pow2(self.height) || !pow2(self.width) {
            return Err(Error::invalid(format!(
                "resolution {}x{} must be powers of two, at least 4",
                self.height, self.width
            )));
        }
        if !(self.noise_scale >= 0.0) || !(self.viscosity >= 0.0) || !(self.dt_sim > 0.0) {
            return Err(Error::invalid("noise_scale and viscosity must be >= 0 and dt_sim > 0"));
        }
        if self.inner_substeps == 0 || self.hidden_factor == 0 {
            return Err(Error::invalid("inner_substeps and hidden_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.density_contrast) {
            return Err(Error::invalid("density_contrast must lie in [0, 1)"));
        }
        Ok(())
    }

    fn sim_params(&self) -> SimParams {
        SimParams {
            viscosity: self.viscosity,
            diffusivity: self.viscosity,
            buoyancy: if self.kind == GeneratorKind::SlicedBuoyancy { 1.0 } else { 0.0 },
            forcing: self.noise_scale,
            dt: self.dt_sim / self.inner_substeps as f64,
            cfl_max: 1.0,
        }
    }
}

/// Generate `n_traj` trajectories of `len` states. Trajectory `i` is driven by
/// its own generator seeded from the `i`-th draw of `rng`, so the result does
/// not depend on thread scheduling.
pub fn generate(spec: &GeneratorSpec, n_traj: usize, len: usize, rng: &mut FlowRng) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    if n_traj == 0 {
        return Err(Error::invalid("at least one trajectory is required"));
    }
    if len < 2 {
        return Err(Error::invalid(format!("trajectory length {len} is below 2")));
    }
    let seeds: Vec<u64> = (0..n_traj).map(|_| rng.random()).collect();
    seeds.par_iter().map(|&s| generate_one(spec, len, s)).collect()
}

fn generate_one(spec: &GeneratorSpec, len: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = rng_from_seed(seed);
    let states = match spec.kind {
        GeneratorKind::RotatingBlob => {
            let p = BlobParams::random(spec, &mut rng);
            (0..len).map(|k| blob_state(&p, spec.height, spec.width, k as f64 * spec.dt_sim)).collect::<Result<_>>()?
        }
        GeneratorKind::SpectralFlow => {
            let (h, w) = (spec.height, spec.width);
            let omega: Vec<f64> = smooth_random(h, w, 3.0, &mut rng).iter().map(|v| 2.0 * v).collect();
            let tracer = unit_peak(smooth_random(h, w, 2.0, &mut rng));
            let sim = SpectralSim::new(h, w, spec.sim_params(), &omega, &tracer)?;
            run_sim(sim, spec, len, 0, w, &mut rng)?
        }
        GeneratorKind::SlicedBuoyancy => {
            let (h, w) = (spec.height, spec.width * spec.hidden_factor);
            let omega: Vec<f64> = smooth_random(h, w, 4.0, &mut rng).iter().map(|v| 0.05 * v).collect();
            let noise = smooth_random(h, w, 4.0, &mut rng);
            let dy = 2.0 * std::f64::consts::PI / h as f64;
            let b: Vec<f64> = (0..h * w).map(|i| -((i / w) as f64 * dy).cos() + 0.1 * noise[i]).collect();
            let sim = SpectralSim::new(h, w, spec.sim_params(), &omega, &b)?;
            run_sim(sim, spec, len, 0, spec.width, &mut rng)?
        }
    };
    Ok(Trajectory {
        states,
        dt_sim: spec.dt_sim,
        meta: TrajectoryMeta { generator: spec.kind.name().into(), seed },
    })
}

fn unit_peak(mut x: Vec<f64>) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        for v in &mut x {
            *v /= m;
        }
    }
    x
}

/// Step the simulator, recording columns `c0..c0 + band` after every
/// `inner_substeps` substeps.
pub(crate) fn run_sim(
    mut sim: SpectralSim,
    spec: &GeneratorSpec,
    len: usize,
    c0: usize,
    band: usize,
    rng: &mut FlowRng,
) -> Result<Vec<Field>> {
    let mut states = Vec::with_capacity(len);
    for k in 0..len {
        if k > 0 {
            for _ in 0..spec.inner_substeps {
                sim.step(rng)?;
            }
        }
        states.push(observe_band(&sim, spec, c0, band, k as f64 * spec.dt_sim)?);
    }
    Ok(states)
}

/// Density `1 ∓ contrast·s` and momenta over a column band of the simulation.
pub fn observe_band(sim: &SpectralSim, spec: &GeneratorSpec, c0: usize, band: usize, tau: f64) -> Result<Field> {
    let (ny, nx) = (sim.ny, sim.nx);
    let (u, v) = sim.velocity();
    let s = sim.scalar();
    // Buoyancy is light fluid, so density falls with it.
    let sign = if spec.kind == GeneratorKind::SlicedBuoyancy { -1.0 } else { 1.0 };
    let n = ny * band;
    let mut data = vec![0.0; 3 * n];
    for i in 0..ny {
        for j in 0..band {
            let src = i * nx + (c0 + j) % nx;
            let rho = 1.0 + sign * spec.density_contrast * s[src];
            let dst = i * band + j;
            data[dst] = rho;
            data[n + dst] = rho * u[src];
            data[2 * n + dst] = rho * v[src];
        }
    }
    Field::new(Tensor::new(vec![3, ny, band], data)?, PHYSICAL_ROLES.to_vec(), tau)
}

/// Build the simulator behind a `sliced_buoyancy` trajectory, for twin
/// experiments on the hidden state.
pub fn sliced_simulation(spec: &GeneratorSpec, omega: &[f64], buoyancy: &[f64]) -> Result<SpectralSim> {
    SpectralSim::new(spec.height, spec.width * spec.hidden_factor, spec.sim_params(), omega, buoyancy)
}

/// Parameters of one rotating blob.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobParams {
    pub radius: f64,
    pub phase: f64,
    pub width: f64,
    pub amplitude: f64,
    /// Angular velocity `angle_per_step / dt_sim`.
    pub omega: f64,
}

impl BlobParams {
    pub fn random(spec: &GeneratorSpec, rng: &mut FlowRng) -> Self {
        BlobParams {
            radius: rng.random_range(0.15..0.3),
            phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
            width: rng.random_range(0.06..0.1),
            amplitude: rng.random_range(0.5..1.0),
            omega: spec.angle_per_step / spec.dt_sim,
        }
    }
}

/// Analytic blob state at time `tau` on the unit square with cell centres
/// `((j + ½)/W, (i + ½)/H)`; the flow is a rigid rotation about the centre.
pub fn blob_state(p: &BlobParams, h: usize, w: usize, tau: f64) -> Result<Field> {
    let ang = p.phase + p.omega * tau;
    let (cx, cy) = (0.5 + p.radius * ang.cos(), 0.5 + p.radius * ang.sin());
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..h {
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let y = (i as f64 + 0.5) / h as f64;
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            let rho = 1.0 + p.amplitude * (-r2 / (2.0 * p.width * p.width)).exp();
            let idx = i * w + j;
            data[idx] = rho;
            data[n + idx] = rho * -p.omega * (y - 0.5);
            data[2 * n + idx] = rho * p.omega * (x - 0.5);
        }
    }
    Field::new(Tensor::new(vec![3, h, w], data)?, PHYSICAL_ROLES.to_vec(), tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::kinetic_energy;

    #[test]
    fn blob_runs_are_reproducible() {
        let spec = GeneratorSpec { height: 16, width: 16, ..GeneratorSpec::new(GeneratorKind::RotatingBlob) };
        let a = generate(&spec, 2, 4, &mut rng_from_seed(7)).unwrap();
        let b = generate(&spec, 2, 4, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 2, 4, &mut rng_from_seed(8)).unwrap();
        assert_ne!(a[0].states[0], c[0].states[0]);
    }

    #[test]
    fn generated_density_is_positive_and_times_advance() {
        for kind in [GeneratorKind::RotatingBlob, GeneratorKind::SpectralFlow, GeneratorKind::SlicedBuoyancy] {
            let spec = GeneratorSpec { height: 16, width: 16, ..GeneratorSpec::new(kind) };
            let t = generate(&spec, 1, 5, &mut rng_from_seed(1)).unwrap().remove(0);
            for (k, s) in t.states.iter().enumerate() {
                assert!((s.sim_time - k as f64 * spec.dt_sim).abs() < 1e-12);
                assert!(s.channel(super::super::ChannelRole::Density).unwrap().iter().all(|&r| r > 0.5));
                assert_eq!(s.channels.shape(), &[3, 16, 16]);
            }
        }
    }

    #[test]
    fn unforced_flow_loses_energy() {
        let spec = GeneratorSpec { height: 32, width: 32, viscosity: 5e-3, ..GeneratorSpec::new(GeneratorKind::SpectralFlow) };
        let t = generate(&spec, 2, 20, &mut rng_from_seed(3)).unwrap();
        for tr in &t {
            let e: Vec<f64> = tr.states.iter().map(|s| kinetic_energy(s).unwrap()).collect();
            assert!(e.windows(2).all(|w| w[1] <= w[0]), "{e:?}");
        }
    }

    #[test]
    fn invalid_requests() {
        let spec = GeneratorSpec::new(GeneratorKind::RotatingBlob);
        assert!(generate(&spec, 0, 4, &mut rng_from_seed(0)).is_err());
        assert!(generate(&spec, 1, 1, &mut rng_from_seed(0)).is_err());
        let bad = GeneratorSpec { height: 12, ..spec };
        assert!(generate(&bad, 1, 4, &mut rng_from_seed(0)).is_err());
    }
}
