//! Synthetic dynamical systems, conditioning channels, datasets and
//! autoregressive rollout of learned transition samplers.

mod fmds;
mod generators;
mod spectral;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::PairSet;
use crate::nn::VelocityField;
use crate::odesolve::{solve, SolverConfig};
use crate::tensor::Tensor;
use crate::FlowRng;

pub use fmds::{read_dataset, write_dataset, Dataset};
pub use generators::{blob_state, generate, observe_band, sliced_simulation, BlobParams, GeneratorKind, GeneratorSpec};
pub use spectral::{SpectralSim, SimParams};

/// Densities are clamped to this value before dividing momenta.
pub const RHO_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Density,
    MomentumX,
    MomentumY,
    CondPos,
    CondTime,
}

impl ChannelRole {
    pub fn tag(self) -> u8 {
        match self {
            ChannelRole::Density => 0,
            ChannelRole::MomentumX => 1,
            ChannelRole::MomentumY => 2,
            ChannelRole::CondPos => 3,
            ChannelRole::CondTime => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ChannelRole::Density,
            1 => ChannelRole::MomentumX,
            2 => ChannelRole::MomentumY,
            3 => ChannelRole::CondPos,
            4 => ChannelRole::CondTime,
            _ => return Err(Error::Format(format!("unknown channel role tag {tag}"))),
        })
    }

    pub fn is_conditioning(self) -> bool {
        matches!(self, ChannelRole::CondPos | ChannelRole::CondTime)
    }
}

/// Physical channels in their canonical order.
pub const PHYSICAL_ROLES: [ChannelRole; 3] = [ChannelRole::Density, ChannelRole::MomentumX, ChannelRole::MomentumY];

/// A `C x H x W` state with named channel roles.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub channels: Tensor,
    pub roles: Vec<ChannelRole>,
    pub sim_time: f64,
}

impl Field {
    pub fn new(channels: Tensor, roles: Vec<ChannelRole>, sim_time: f64) -> Result<Self> {
        if channels.rank() != 3 || channels.shape()[0] != roles.len() {
            return Err(Error::shape(format!(
                "field of shape {:?} with {} channel roles",
                channels.shape(),
                roles.len()
            )));
        }
        Ok(Field { channels, roles, sim_time })
    }

    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }

    /// Channel with the given role.
    pub fn channel(&self, role: ChannelRole) -> Result<&[f64]> {
        let i = self
            .roles
            .iter()
            .position(|&r| r == role)
            .ok_or_else(|| Error::invalid(format!("field has no {role:?} channel")))?;
        let n = self.height() * self.width();
        Ok(&self.channels.data()[i * n..(i + 1) * n])
    }

    pub fn is_augmented(&self) -> bool {
        self.roles.iter().any(|r| r.is_conditioning())
    }

    /// The field with conditioning channels removed.
    pub fn physical(&self) -> Field {
        let n = self.height() * self.width();
        let mut data = Vec::new();
        let mut roles = Vec::new();
        for (i, &r) in self.roles.iter().enumerate() {
            if !r.is_conditioning() {
                data.extend_from_slice(&self.channels.data()[i * n..(i + 1) * n]);
                roles.push(r);
            }
        }
        let channels = Tensor::new(vec![roles.len(), self.height(), self.width()], data).expect("sizes agree");
        Field { channels, roles, sim_time: self.sim_time }
    }
}

/// Append the vertical ramp `i / (H - 1)` and the constant `τ / τ_max`.
pub fn augment(y: &Field, tau: f64, tau_max: f64) -> Result<Field> {
    if y.is_augmented() {
        return Err(Error::invalid("field already carries conditioning channels"));
    }
    if !(tau_max > 0.0) || tau < 0.0 || tau > tau_max {
        return Err(Error::invalid(format!("time {tau} outside [0, {tau_max}]")));
    }
    let (h, w) = (y.height(), y.width());
    if h < 2 {
        return Err(Error::shape(format!("positional encoding needs at least 2 rows, got {h}")));
    }
    let mut data = y.channels.data().to_vec();
    for i in 0..h {
        data.extend(std::iter::repeat_n(i as f64 / (h - 1) as f64, w));
    }
    data.extend(std::iter::repeat_n(tau / tau_max, h * w));
    let mut roles = y.roles.clone();
    roles.extend([ChannelRole::CondPos, ChannelRole::CondTime]);
    Field::new(Tensor::new(vec![roles.len(), h, w], data)?, roles, y.sim_time)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub generator: String,
    pub seed: u64,
}

/// States at `sim_time = τ_0 + k dt_sim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Field>,
    pub dt_sim: f64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Simulation time span covered by `len` states starting at zero.
    pub fn tau_max(&self) -> f64 {
        (self.len().max(2) - 1) as f64 * self.dt_sim
    }
}

/// Per-channel affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over every state of every trajectory.
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .first()
            .and_then(|t| t.states.first())
            .ok_or_else(|| Error::invalid("no states to fit normalization on"))?;
        let c = first.channels.shape()[0];
        let n = first.height() * first.width();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for s in trajectories.iter().flat_map(|t| &t.states) {
            s.channels.expect_shape(first.channels.shape())?;
            for ch in 0..c {
                for &v in &s.channels.data()[ch * n..(ch + 1) * n] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += n;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let c = self.mean.len();
        let shape = x.shape();
        if shape.len() < 3 || shape[shape.len() - 3] != c {
            return Err(Error::shape(format!("normalization for {c} channels applied to {shape:?}")));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        Ok(out)
    }

    /// Physical to standardized units, for `[.., C, H, W]` tensors.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| v * s + m)
    }
}

/// Network conditioning for state `y`: standardized physical channels plus
/// the positional and time channels.
pub fn conditioning(y: &Field, norm: &Normalization, tau_max: f64) -> Result<Tensor> {
    let phys = y.physical();
    let z = Field::new(norm.normalize(&phys.channels)?, phys.roles, phys.sim_time)?;
    Ok(augment(&z, y.sim_time, tau_max)?.channels)
}

/// Training pairs `(cond(y_k), normalize(y_{k+1}))` over all consecutive steps.
pub fn transition_pairs(trajectories: &[Trajectory], norm: &Normalization) -> Result<PairSet> {
    let mut conds = Vec::new();
    let mut targets = Vec::new();
    for tr in trajectories {
        let tau_max = tr.tau_max();
        for w in tr.states.windows(2) {
            conds.push(conditioning(&w[0], norm, tau_max)?);
            targets.push(norm.normalize(&w[1].physical().channels)?);
        }
    }
    PairSet::new(Some(conds), targets)
}

/// Split whole trajectories: `round(fraction * n)` go to the test set.
pub fn split_train_test(
    trajectories: Vec<Trajectory>,
    test_fraction: f64,
    rng: &mut FlowRng,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let n = trajectories.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 trajectories to split, got {n}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test_set: std::collections::HashSet<usize> = idx[..n_test].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, t) in trajectories.into_iter().enumerate() {
        if test_set.contains(&i) {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    Ok((train, test))
}

/// How the next state is drawn from the conditioning.
#[derive(Clone, Copy)]
pub enum Sampler<'a> {
    /// Integrate the learned flow from fresh noise.
    Flow { field: &'a dyn VelocityField, solver: SolverConfig },
    /// Direct map `w(y) = v_0(0 | y)`; draws no noise.
    Deterministic(&'a dyn VelocityField),
    /// `x0 + v_0(x0 | y)`.
    OneStep(&'a dyn VelocityField),
}

impl Sampler<'_> {
    pub fn evaluations_per_step(&self) -> usize {
        match self {
            Sampler::Flow { solver, .. } => solver.evaluations(),
            Sampler::Deterministic(_) | Sampler::OneStep(_) => 1,
        }
    }

    /// Standardized next state for batched conditioning `[B, C', H, W]`.
    pub fn transition(&self, cond: &Tensor, out_channels: usize, rng: &mut FlowRng) -> Result<Tensor> {
        let s = cond.shape();
        let shape = [s[0], out_channels, s[2], s[3]];
        match self {
            Sampler::Flow { field, solver } => solve(*field, &Tensor::randn(&shape, rng), Some(cond), solver),
            Sampler::Deterministic(f) => f.velocity(&vec![0.0; s[0]], &Tensor::zeros(&shape), Some(cond)),
            Sampler::OneStep(f) => crate::distill::one_step_sample(*f, &Tensor::randn(&shape, rng), Some(cond)),
        }
    }
}

/// A failed rollout with the states produced before the failure.
#[derive(Debug)]
pub struct RolloutError {
    pub partial: Trajectory,
    pub error: Error,
}

impl std::fmt::Display for RolloutError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rollout failed after {} states: {}", self.partial.len(), self.error)
    }
}

impl std::error::Error for RolloutError {}

/// Autoregressive rollout of `k` steps from the augmented state `y0`.
/// States are returned in physical units, each with fresh conditioning
/// channels for its own simulation time.
pub fn rollout(
    sampler: &Sampler<'_>,
    y0: &Field,
    norm: &Normalization,
    dt_sim: f64,
    tau_max: f64,
    k: usize,
    rng: &mut FlowRng,
) -> std::result::Result<Trajectory, RolloutError> {
    let meta = TrajectoryMeta { generator: "rollout".into(), seed: 0 };
    let mut traj = Trajectory { states: vec![y0.clone()], dt_sim, meta };
    if !y0.is_augmented() {
        return Err(RolloutError { partial: traj, error: Error::invalid("initial state must be augmented") });
    }
    let c = y0.physical().roles.len();
    for step in 0..k {
        let y = traj.states.last().expect("non-empty").clone();
        let next = (|| -> Result<Field> {
            let cond = conditioning(&y, norm, tau_max)?;
            let (h, w) = (y.height(), y.width());
            let cc = cond.shape()[0];
            let cond = cond.reshape(&[1, cc, h, w])?;
            let z = sampler.transition(&cond, c, rng)?;
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("rollout state {}", step + 1)));
            }
            let phys = norm.denormalize(&z)?.reshape(&[c, h, w])?;
            let tau = y.sim_time + dt_sim;
            let field = Field::new(phys, y.physical().roles, tau)?;
            augment(&field, tau.min(tau_max), tau_max)
        })();
        match next {
            Ok(f) => traj.states.push(f),
            Err(error) => return Err(RolloutError { partial: traj, error }),
        }
    }
    Ok(traj)
}
