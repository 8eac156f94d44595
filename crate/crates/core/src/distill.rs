//! Few-step samplers distilled from a pretrained flow: direct distillation,
//! progressive step halving, adversarial distillation (with the pure WGAN
//! limit) and rectification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{mse_graph, PathSample, TransitionSource};
use crate::nn::{
    adam_step, input_gradient, optimize, AdamState, BoundParams, LossTrace, OptimSettings, VelocityField,
    VelocityModel,
};
use crate::odesolve::{solve_batched, SolverConfig};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::FlowRng;

const SOLVE_CHUNK: usize = 64;

/// One-step generator `G(x0 | y) = x0 + v_0(x0 | y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorHead {
    pub model: VelocityModel,
}

impl GeneratorHead {
    /// Start from a copy of the pretrained flow.
    pub fn from_flow(theta: &VelocityModel) -> Self {
        GeneratorHead { model: theta.clone() }
    }

    pub fn sample(&self, x0: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        one_step_sample(&self.model, x0, cond)
    }
}

/// Critic `D(x | y) = Σ_i v_0(x | y)_i`, one value per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorHead {
    pub model: VelocityModel,
}

impl DiscriminatorHead {
    pub fn from_flow(theta: &VelocityModel) -> Self {
        DiscriminatorHead { model: theta.clone() }
    }

    pub fn value(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Vec<f64>> {
        let v = self.model.forward(x, &vec![0.0; x.shape()[0]], cond)?;
        Ok(v.unstack().iter().map(Tensor::sum).collect())
    }
}

/// Student of one progressive stage: an `m`-step Euler sampler with step `1/m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveStage {
    pub m: usize,
    pub model: VelocityModel,
    /// Stage loss on a fresh batch after training.
    pub residual: f64,
}

impl ProgressiveStage {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig::euler(self.m)
    }

    /// The final single-step sampler; only defined for `m = 1`.
    pub fn one_step(&self, x0: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        if self.m != 1 {
            return Err(Error::invalid(format!("stage m={} is not a one-step sampler", self.m)));
        }
        one_step_sample(&self.model, x0, cond)
    }
}

/// `x0 + v_0(x0 | y)`, exactly one field evaluation.
pub fn one_step_sample(field: &dyn VelocityField, x0: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
    let v = field.velocity(&vec![0.0; x0.shape()[0]], x0, cond)?;
    x0.add(&v)
}

/// Settings of the adversarial trainer. `lambda = 0` is the pure WGAN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub d_to_g_ratio: usize,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl Default for AddConfig {
    fn default() -> Self {
        AddConfig { lambda: 0.5, gamma: 5.0, d_to_g_ratio: 5, lr_g: 1e-5, lr_d: 1e-5 }
    }
}

impl AddConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma {} must be non-negative", self.gamma)));
        }
        if self.d_to_g_ratio == 0 {
            return Err(Error::invalid("d_to_g_ratio must be at least 1"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// How teacher ODE solutions are produced and cached.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSettings {
    pub solver: SolverConfig,
    /// Couplings solved per epoch; minibatches are drawn from this pool.
    pub pool_size: usize,
}

impl TeacherSettings {
    pub fn new(solver: SolverConfig, pool_size: usize) -> Self {
        TeacherSettings { solver, pool_size }
    }
}

impl Default for TeacherSettings {
    fn default() -> Self {
        TeacherSettings { solver: SolverConfig::midpoint(10), pool_size: 1024 }
    }
}

/// Noise draws with their conditioning and the teacher's ODE endpoints.
#[derive(Clone, Debug)]
pub struct Couplings {
    pub x0: Tensor,
    pub cond: Option<Tensor>,
    pub x1: Tensor,
}

impl Couplings {
    /// Draw `n` conditions from `data`, fresh noise, and solve the teacher flow.
    pub fn solve(
        teacher: &dyn VelocityField,
        data: &dyn TransitionSource,
        n: usize,
        solver: &SolverConfig,
        rng: &mut FlowRng,
    ) -> Result<Self> {
        let batch = data.sample_batch(n, rng)?;
        let x0 = Tensor::randn(batch.target.shape(), rng);
        let x1 = solve_batched(teacher, &x0, batch.cond.as_ref(), solver, SOLVE_CHUNK)?;
        Ok(Couplings { x0, cond: batch.cond, x1 })
    }

    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, n: usize, rng: &mut FlowRng) -> Couplings {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        Couplings {
            x0: self.x0.gather0(&idx),
            cond: self.cond.as_ref().map(|c| c.gather0(&idx)),
            x1: self.x1.gather0(&idx),
        }
    }
}

/// Pool of couplings re-solved once every epoch (one pass over the pool).
struct CouplingPool<'a> {
    teacher: &'a dyn VelocityField,
    data: &'a dyn TransitionSource,
    settings: &'a TeacherSettings,
    epoch_steps: usize,
    current: Option<Couplings>,
    used: usize,
}

impl<'a> CouplingPool<'a> {
    fn new(
        teacher: &'a dyn VelocityField,
        data: &'a dyn TransitionSource,
        settings: &'a TeacherSettings,
        batch_size: usize,
    ) -> Result<Self> {
        settings.solver.validate()?;
        if settings.pool_size == 0 {
            return Err(Error::invalid("teacher pool size must be positive"));
        }
        let epoch_steps = settings.pool_size.div_ceil(batch_size.max(1));
        Ok(CouplingPool { teacher, data, settings, epoch_steps, current: None, used: 0 })
    }

    fn next(&mut self, n: usize, rng: &mut FlowRng) -> Result<Couplings> {
        if self.current.is_none() || self.used == self.epoch_steps {
            let pool = Couplings::solve(self.teacher, self.data, self.settings.pool_size, &self.settings.solver, rng)?;
            self.current = Some(pool);
            self.used = 0;
        }
        self.used += 1;
        Ok(self.current.as_ref().expect("pool filled above").sample(n, rng))
    }
}

/// One-step generator output `x0 + v_0(x0 | y)` recorded on `g`.
pub fn generator_graph(
    g: &mut Graph,
    model: &VelocityModel,
    bound: &BoundParams,
    x0: &Tensor,
    cond: Option<&Tensor>,
) -> Result<Var> {
    let xv = g.constant(x0.clone());
    let cv = cond.map(|c| g.constant(c.clone()));
    let v = model.forward_graph(g, bound, xv, &vec![0.0; x0.shape()[0]], cv)?;
    Ok(g.add(xv, v))
}

/// Per-row critic values `[B, 1]` for an input already on the graph.
pub fn critic_graph(
    g: &mut Graph,
    model: &VelocityModel,
    bound: &BoundParams,
    x: Var,
    cond: Option<&Tensor>,
) -> Result<Var> {
    let batch = g.shape(x)[0];
    let cv = cond.map(|c| g.constant(c.clone()));
    let v = model.forward_graph(g, bound, x, &vec![0.0; batch], cv)?;
    let n = g.shape(v).iter().product::<usize>() / batch;
    let flat = g.reshape(v, &[batch, n]);
    Ok(g.sum_to(flat, &[batch, 1]))
}

/// Least-squares distillation loss between the generator and teacher endpoints.
pub fn distill_loss_graph(
    g: &mut Graph,
    model: &VelocityModel,
    bound: &BoundParams,
    couplings: &Couplings,
) -> Result<Var> {
    let out = generator_graph(g, model, bound, &couplings.x0, couplings.cond.as_ref())?;
    let target = g.constant(couplings.x1.clone());
    Ok(mse_graph(g, out, target))
}

/// `max(0, 1 - d)`, applied to critic values of generated samples.
pub fn hinge_fake(d: f64) -> f64 {
    (1.0 - d).max(0.0)
}

/// `max(0, 1 + d)`, applied to critic values of data samples.
pub fn hinge_real(d: f64) -> f64 {
    (1.0 + d).max(0.0)
}

/// `γ · mean_b ‖∇_x D(x1_b)‖²` at data samples.
pub fn gradient_penalty(critic: &VelocityModel, x1: &Tensor, cond: Option<&Tensor>, gamma: f64) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let grad = input_gradient(critic, x1, cond)?;
    Ok(gamma * grad.sq_norm() / x1.shape()[0] as f64)
}

fn penalty_graph(
    g: &mut Graph,
    critic: &VelocityModel,
    bound: &BoundParams,
    x1: &Tensor,
    cond: Option<&Tensor>,
    gamma: f64,
) -> Result<Var> {
    let xv = g.leaf(x1.clone(), true);
    let d = critic_graph(g, critic, bound, xv, cond)?;
    let total = g.sum_all(d);
    let grad = g.backward(total, &[xv])?.remove(0);
    let sq = g.square(grad);
    let s = g.sum_all(sq);
    Ok(g.scale(s, gamma / x1.shape()[0] as f64))
}

/// Critic objective: hinge on fakes and data plus the gradient penalty.
/// Returns `(loss, penalty)` nodes.
pub fn discriminator_loss_graph(
    g: &mut Graph,
    critic: &VelocityModel,
    bound: &BoundParams,
    fake: &Tensor,
    real: &Tensor,
    cond: Option<&Tensor>,
    gamma: f64,
) -> Result<(Var, Var)> {
    let fv = g.constant(fake.clone());
    let df = critic_graph(g, critic, bound, fv, cond)?;
    let neg = g.neg(df);
    let shifted = g.add_scalar(neg, 1.0);
    let hf = g.relu(shifted);
    let lf = g.mean_all(hf);
    let rv = g.constant(real.clone());
    let dr = critic_graph(g, critic, bound, rv, cond)?;
    let shifted = g.add_scalar(dr, 1.0);
    let hr = g.relu(shifted);
    let lr = g.mean_all(hr);
    let hinge = g.add(lf, lr);
    let pen = if gamma > 0.0 {
        penalty_graph(g, critic, bound, real, cond, gamma)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    Ok((g.add(hinge, pen), pen))
}

/// Node values of one generator objective evaluation.
pub struct GeneratorTerms {
    pub total: Var,
    pub distill: Option<Var>,
    pub adv: Option<Var>,
}

/// `λ·distill + (1 - λ)·mean_b D(G(x0))`; the distillation term is skipped
/// at `λ = 0` and the adversarial term at `λ = 1`.
pub fn generator_loss_graph(
    g: &mut Graph,
    gen: &VelocityModel,
    gen_bound: &BoundParams,
    critic: &VelocityModel,
    critic_bound: &BoundParams,
    couplings: &Couplings,
    lambda: f64,
) -> Result<GeneratorTerms> {
    if lambda == 1.0 {
        let d = distill_loss_graph(g, gen, gen_bound, couplings)?;
        return Ok(GeneratorTerms { total: d, distill: Some(d), adv: None });
    }
    let out = generator_graph(g, gen, gen_bound, &couplings.x0, couplings.cond.as_ref())?;
    let dv = critic_graph(g, critic, critic_bound, out, couplings.cond.as_ref())?;
    let adv = g.mean_all(dv);
    if lambda == 0.0 {
        return Ok(GeneratorTerms { total: adv, distill: None, adv: Some(adv) });
    }
    let target = g.constant(couplings.x1.clone());
    let distill = mse_graph(g, out, target);
    let a = g.scale(distill, lambda);
    let b = g.scale(adv, 1.0 - lambda);
    Ok(GeneratorTerms { total: g.add(a, b), distill: Some(distill), adv: Some(adv) })
}

/// Gradient of the direct distillation loss w.r.t. the generator parameters.
pub fn distill_gradients(gen: &VelocityModel, couplings: &Couplings) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &gen.params, true);
    let loss = distill_loss_graph(&mut g, gen, &bound, couplings)?;
    g.gradients(loss, &bound.vars())
}

/// Gradient of the blended generator loss w.r.t. the generator parameters.
pub fn generator_gradients(
    gen: &VelocityModel,
    critic: &VelocityModel,
    couplings: &Couplings,
    lambda: f64,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let gb = BoundParams::bind(&mut g, &gen.params, true);
    let cb = BoundParams::bind(&mut g, &critic.params, false);
    let terms = generator_loss_graph(&mut g, gen, &gb, critic, &cb, couplings, lambda)?;
    g.gradients(terms.total, &gb.vars())
}

/// Fit `G(x0) ≈ φ_1(x0)` in least squares. The generator starts from `init`,
/// normally a copy of the flow behind `teacher`.
pub fn direct_distill(
    teacher: &dyn VelocityField,
    init: &VelocityModel,
    data: &dyn TransitionSource,
    teacher_settings: &TeacherSettings,
    settings: &OptimSettings,
    rng: &mut FlowRng,
) -> Result<(GeneratorHead, LossTrace)> {
    let mut head = GeneratorHead::from_flow(init);
    let arch = init.clone();
    let mut pool = CouplingPool::new(teacher, data, teacher_settings, settings.batch_size)?;
    let trace = optimize(&mut head.model.params, settings, rng, |g, bound, rng| {
        let c = pool.next(settings.batch_size, rng)?;
        distill_loss_graph(g, &arch, bound, &c)
    })?;
    Ok((head, trace))
}

/// Progressive loss for a student with `s = m/2` steps against an expert
/// with `m` steps, at student step starts `t ∈ {0, 1/s, …, (s-1)/s}`.
fn progressive_loss(
    g: &mut Graph,
    student: &VelocityModel,
    bound: &BoundParams,
    expert: &dyn VelocityField,
    path: &PathSample,
    cond: Option<&Tensor>,
    m: usize,
) -> Result<Var> {
    let h = 1.0 / m as f64;
    let t = &path.t;
    let mid = expert.velocity(t, &path.xt, cond)?;
    let mut x = path.xt.clone();
    x.axpy(h, &mid)?;
    let t2: Vec<f64> = t.iter().map(|t| t + h).collect();
    let v2 = expert.velocity(&t2, &x, cond)?;
    x.axpy(h, &v2)?;
    let xv = g.constant(path.xt.clone());
    let cv = cond.map(|c| g.constant(c.clone()));
    let v = student.forward_graph(g, bound, xv, t, cv)?;
    let step = g.scale(v, 2.0 * h);
    let out = g.add(xv, step);
    let target = g.constant(x);
    Ok(mse_graph(g, out, target))
}

fn progressive_path(data: &dyn TransitionSource, n: usize, s: usize, rng: &mut FlowRng) -> Result<(PathSample, Option<Tensor>)> {
    let batch = data.sample_batch(n, rng)?;
    let x0 = Tensor::randn(batch.target.shape(), rng);
    let t = (0..n).map(|_| rng.random_range(0..s) as f64 / s as f64).collect();
    Ok((PathSample::at(x0, batch.target, t)?, batch.cond))
}

/// Halve the Euler step count from `n` down to one. Stage `m` trains a
/// student to match two `1/m` expert steps with one `2/m` step; the first
/// expert is `teacher` read as an `n`-step Euler sampler and the first
/// student starts from `init`.
pub fn progressive_distill(
    teacher: &dyn VelocityField,
    init: &VelocityModel,
    data: &dyn TransitionSource,
    n: usize,
    settings: &OptimSettings,
    rng: &mut FlowRng,
) -> Result<Vec<ProgressiveStage>> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("step count {n} must be a power of two and at least 2")));
    }
    let mut stages: Vec<ProgressiveStage> = Vec::new();
    let mut m = n;
    let mut student = init.clone();
    while m >= 2 {
        let s = m / 2;
        let expert_model = stages.last().map(|st| st.model.clone());
        let expert: &dyn VelocityField = match &expert_model {
            Some(e) => e,
            None => teacher,
        };
        let arch = student.clone();
        optimize(&mut student.params, settings, rng, |g, bound, rng| {
            let (path, cond) = progressive_path(data, settings.batch_size, s, rng)?;
            progressive_loss(g, &arch, bound, expert, &path, cond.as_ref(), m)
        })?;
        let (path, cond) = progressive_path(data, settings.batch_size.max(256), s, rng)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &student.params, false);
        let loss = progressive_loss(&mut g, &student, &bound, expert, &path, cond.as_ref(), m)?;
        let residual = g.value(loss).item();
        stages.push(ProgressiveStage { m: s, model: student.clone(), residual });
        m = s;
    }
    Ok(stages)
}

/// Retrain on couplings `(x0, φ_1(x0))` of the current flow with the flow
/// matching loss, starting from the current parameters.
pub fn rectify(
    theta: &VelocityModel,
    data: &dyn TransitionSource,
    teacher_settings: &TeacherSettings,
    settings: &OptimSettings,
    rng: &mut FlowRng,
) -> Result<(VelocityModel, LossTrace)> {
    let mut model = theta.clone();
    let arch = theta.clone();
    let mut pool = CouplingPool::new(theta, data, teacher_settings, settings.batch_size)?;
    let trace = optimize(&mut model.params, settings, rng, |g, bound, rng| {
        let c = pool.next(settings.batch_size, rng)?;
        let t = (0..c.len()).map(|_| rng.random::<f64>()).collect();
        let path = PathSample::at(c.x0, c.x1, t)?;
        crate::flowmatch::fm_loss_graph(g, &arch, bound, &path, c.cond.as_ref())
    })?;
    Ok((model, trace))
}

/// Per-generator-update log of the adversarial trainer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AddLogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_distill: f64,
    pub loss_adv: f64,
    pub loss_d: f64,
    pub penalty: f64,
}

pub fn write_add_log(rows: &[AddLogRow], path: &std::path::Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("step,loss_total,loss_distill,loss_adv,loss_D,penalty\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.loss_total, r.loss_distill, r.loss_adv, r.loss_d, r.penalty);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Trained heads and their log.
#[derive(Clone, Debug)]
pub struct AddOutcome {
    pub generator: GeneratorHead,
    pub discriminator: DiscriminatorHead,
    pub log: Vec<AddLogRow>,
}

/// Adversarial distillation: `cfg.d_to_g_ratio` critic updates per generator
/// update, `steps` generator updates. Both heads start from `theta`. Teacher
/// solves happen only for generator updates and only when `lambda > 0`.
pub fn add_train(
    teacher: &dyn VelocityField,
    theta: &VelocityModel,
    data: &dyn TransitionSource,
    cfg: &AddConfig,
    teacher_settings: &TeacherSettings,
    steps: usize,
    batch_size: usize,
    rng: &mut FlowRng,
) -> Result<AddOutcome> {
    cfg.validate()?;
    let mut gen = GeneratorHead::from_flow(theta);
    let mut disc = DiscriminatorHead::from_flow(theta);
    let mut g_state = AdamState::default();
    let mut d_state = AdamState::default();
    let adam = crate::nn::AdamConfig::default();
    let mut pool = CouplingPool::new(teacher, data, teacher_settings, batch_size)?;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut loss_d = 0.0;
        let mut penalty = 0.0;
        for _ in 0..cfg.d_to_g_ratio {
            let batch = data.sample_batch(batch_size, rng)?;
            let x0 = Tensor::randn(batch.target.shape(), rng);
            let fake = gen.sample(&x0, batch.cond.as_ref())?;
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &disc.model.params, true);
            let (loss, pen) = discriminator_loss_graph(
                &mut g,
                &disc.model,
                &bound,
                &fake,
                &batch.target,
                batch.cond.as_ref(),
                cfg.gamma,
            )?;
            loss_d = g.value(loss).item();
            penalty = g.value(pen).item();
            if !loss_d.is_finite() || g.check_finite().is_err() {
                return Err(Error::NonFinite(format!("discriminator loss at step {step}")));
            }
            let grads = g.gradients(loss, &bound.vars())?;
            adam_step(&mut disc.model.params, &grads, cfg.lr_d, &adam, &mut d_state)?;
        }
        let couplings = if cfg.lambda > 0.0 {
            pool.next(batch_size, rng)?
        } else {
            let batch = data.sample_batch(batch_size, rng)?;
            let x0 = Tensor::randn(batch.target.shape(), rng);
            Couplings { x1: x0.clone(), x0, cond: batch.cond }
        };
        let mut g = Graph::new();
        let gb = BoundParams::bind(&mut g, &gen.model.params, true);
        let cb = BoundParams::bind(&mut g, &disc.model.params, false);
        let terms = generator_loss_graph(&mut g, &gen.model, &gb, &disc.model, &cb, &couplings, cfg.lambda)?;
        let total = g.value(terms.total).item();
        if !total.is_finite() || g.check_finite().is_err() {
            return Err(Error::NonFinite(format!("generator loss at step {step}")));
        }
        let grads = g.gradients(terms.total, &gb.vars())?;
        adam_step(&mut gen.model.params, &grads, cfg.lr_g, &adam, &mut g_state)?;
        log.push(AddLogRow {
            step,
            loss_total: total,
            loss_distill: terms.distill.map_or(0.0, |v| g.value(v).item()),
            loss_adv: terms.adv.map_or(0.0, |v| g.value(v).item()),
            loss_d,
            penalty,
        });
    }
    Ok(AddOutcome { generator: gen, discriminator: disc, log })
}
