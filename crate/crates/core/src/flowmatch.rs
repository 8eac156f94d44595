//! Gaussian optimal-transport path, the conditional flow matching loss, and
//! the deterministic least-squares baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{optimize, BoundParams, LossTrace, OptimSettings, VelocityField, VelocityModel};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::FlowRng;

/// A batch of `(x0, x1, t)` draws on the straight path, with the derived
/// interpolant `xt = t x1 + (1 - t) x0` and target velocity `x1 - x0`.
#[derive(Clone, Debug)]
pub struct PathSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub xt: Tensor,
    pub dxt: Tensor,
}

impl PathSample {
    /// Build the path sample for given endpoints and per-sample times.
    pub fn at(x0: Tensor, x1: Tensor, t: Vec<f64>) -> Result<Self> {
        x0.expect_shape(x1.shape())?;
        let batch = x1.shape().first().copied().unwrap_or(1);
        if t.len() != batch {
            return Err(Error::shape(format!("{} times for a batch of {batch}", t.len())));
        }
        let inner = x1.numel() / batch.max(1);
        let mut xt = Vec::with_capacity(x1.numel());
        for (i, (a, b)) in x0.data().iter().zip(x1.data()).enumerate() {
            let ti = t[i / inner];
            xt.push(ti * b + (1.0 - ti) * a);
        }
        let xt = Tensor::new(x1.shape().to_vec(), xt)?;
        let dxt = x1.sub(&x0)?;
        Ok(PathSample { x0, x1, t, xt, dxt })
    }
}

/// Draw `x0 ~ N(0, I)` and `t ~ U(0, 1)` per sample of the batched `x1`.
pub fn sample_path(x1: &Tensor, rng: &mut FlowRng) -> PathSample {
    let x0 = Tensor::randn(x1.shape(), rng);
    let t = (0..x1.shape()[0]).map(|_| rng.random::<f64>()).collect();
    PathSample::at(x0, x1.clone(), t).expect("shapes agree by construction")
}

/// Conditioning and targets of a training batch, batched on the leading axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub cond: Option<Tensor>,
    pub target: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that yields `(y_k, y_{k+1})` training pairs.
pub trait TransitionSource: Sync {
    fn sample_batch(&self, n: usize, rng: &mut FlowRng) -> Result<Batch>;
}

/// A finite set of pairs, sampled uniformly with replacement.
#[derive(Clone, Debug)]
pub struct PairSet {
    conds: Option<Vec<Tensor>>,
    targets: Vec<Tensor>,
}

impl PairSet {
    pub fn new(conds: Option<Vec<Tensor>>, targets: Vec<Tensor>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("pair set is empty"));
        }
        let shape = targets[0].shape().to_vec();
        if targets.iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::shape("targets of a pair set must share one shape"));
        }
        if let Some(c) = &conds {
            if c.len() != targets.len() {
                return Err(Error::shape(format!("{} conditions for {} targets", c.len(), targets.len())));
            }
            let cs = c[0].shape().to_vec();
            if c.iter().any(|t| t.shape() != cs.as_slice()) {
                return Err(Error::shape("conditions of a pair set must share one shape"));
            }
        }
        Ok(PairSet { conds, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_shape(&self) -> &[usize] {
        self.targets[0].shape()
    }

    pub fn cond_shape(&self) -> Option<&[usize]> {
        self.conds.as_ref().map(|c| c[0].shape())
    }

    /// Gather pairs by index.
    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        let target = Tensor::stack(&idx.iter().map(|&i| self.targets[i].clone()).collect::<Vec<_>>())?;
        let cond = match &self.conds {
            Some(c) => Some(Tensor::stack(&idx.iter().map(|&i| c[i].clone()).collect::<Vec<_>>())?),
            None => None,
        };
        Ok(Batch { cond, target })
    }
}

impl TransitionSource for PairSet {
    fn sample_batch(&self, n: usize, rng: &mut FlowRng) -> Result<Batch> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.targets.len())).collect();
        self.gather(&idx)
    }
}

/// Draws fresh `(cond, target)` samples from a closure; used for analytic toys.
pub struct SampledSource<F>(pub F);

impl<F> TransitionSource for SampledSource<F>
where
    F: Fn(&mut FlowRng) -> (Option<Tensor>, Tensor) + Sync,
{
    fn sample_batch(&self, n: usize, rng: &mut FlowRng) -> Result<Batch> {
        let mut conds = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let (c, t) = (self.0)(rng);
            if let Some(c) = c {
                conds.push(c);
            }
            targets.push(t);
        }
        let cond = if conds.is_empty() {
            None
        } else if conds.len() == n {
            Some(Tensor::stack(&conds)?)
        } else {
            return Err(Error::invalid("sampler returned conditioning for some draws only"));
        };
        Ok(Batch { cond, target: Tensor::stack(&targets)? })
    }
}

/// Mean over batch and entries of `(v - target)^2`, recorded on `g`.
pub fn mse_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let r = g.sub(pred, target);
    let sq = g.square(r);
    g.mean_all(sq)
}

/// Flow matching loss for one path sample, recorded on `g`.
pub fn fm_loss_graph(
    g: &mut Graph,
    model: &VelocityModel,
    bound: &BoundParams,
    path: &PathSample,
    cond: Option<&Tensor>,
) -> Result<Var> {
    let xt = g.constant(path.xt.clone());
    let cv = cond.map(|c| g.constant(c.clone()));
    let v = model.forward_graph(g, bound, xt, &path.t, cv)?;
    let target = g.constant(path.dxt.clone());
    Ok(mse_graph(g, v, target))
}

/// Evaluate the flow matching loss of any velocity field on a batch.
pub fn fm_loss(field: &dyn VelocityField, batch: &Batch, rng: &mut FlowRng) -> Result<f64> {
    let path = sample_path(&batch.target, rng);
    path_loss(field, &path, batch.cond.as_ref())
}

/// Flow matching loss at a fixed path sample.
pub fn path_loss(field: &dyn VelocityField, path: &PathSample, cond: Option<&Tensor>) -> Result<f64> {
    let v = field.velocity(&path.t, &path.xt, cond)?;
    let r = v.sub(&path.dxt)?;
    let loss = r.sq_norm() / r.numel() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("flow matching loss".into()));
    }
    Ok(loss)
}

/// Train `init` with the conditional flow matching objective.
pub fn train_fm(
    init: &VelocityModel,
    data: &dyn TransitionSource,
    settings: &OptimSettings,
    rng: &mut FlowRng,
) -> Result<(VelocityModel, LossTrace)> {
    let mut model = init.clone();
    let arch = model.clone();
    let trace = optimize(&mut model.params, settings, rng, |g, bound, rng| {
        let batch = data.sample_batch(settings.batch_size, rng)?;
        let path = sample_path(&batch.target, rng);
        fm_loss_graph(g, &arch, bound, &path, batch.cond.as_ref())
    })?;
    Ok((model, trace))
}

/// Output of the network used as a direct map `w(y) = v_0(0 | y)`.
pub fn deterministic_graph(
    g: &mut Graph,
    model: &VelocityModel,
    bound: &BoundParams,
    target_shape: &[usize],
    cond: Option<&Tensor>,
) -> Result<Var> {
    let zeros = g.constant(Tensor::zeros(target_shape));
    let cv = cond.map(|c| g.constant(c.clone()));
    let t = vec![0.0; target_shape[0]];
    model.forward_graph(g, bound, zeros, &t, cv)
}

/// Least-squares fit of the direct map `w(y_k) ≈ y_{k+1}`.
pub fn train_deterministic(
    init: &VelocityModel,
    data: &dyn TransitionSource,
    settings: &OptimSettings,
    rng: &mut FlowRng,
) -> Result<(VelocityModel, LossTrace)> {
    let mut model = init.clone();
    let arch = model.clone();
    let trace = optimize(&mut model.params, settings, rng, |g, bound, rng| {
        let batch = data.sample_batch(settings.batch_size, rng)?;
        let w = deterministic_graph(g, &arch, bound, batch.target.shape(), batch.cond.as_ref())?;
        let target = g.constant(batch.target);
        Ok(mse_graph(g, w, target))
    })?;
    Ok((model, trace))
}

/// Prediction of a deterministic model for batched conditioning.
pub fn predict_deterministic(model: &VelocityModel, target_shape: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
    let zeros = Tensor::zeros(target_shape);
    model.forward(&zeros, &vec![0.0; target_shape[0]], cond)
}

/// Monte-Carlo mean of one explicit Euler step `x0 + v_0(x0 | y)` over
/// `n_draws` noise samples of shape `sample_shape`.
pub fn initial_direction_mean_check(
    field: &dyn VelocityField,
    sample_shape: &[usize],
    cond: Option<&Tensor>,
    n_draws: usize,
    rng: &mut FlowRng,
) -> Result<Tensor> {
    const CHUNK: usize = 1000;
    let mut acc = Tensor::zeros(sample_shape);
    let mut done = 0;
    while done < n_draws {
        let n = CHUNK.min(n_draws - done);
        let mut shape = vec![n];
        shape.extend_from_slice(sample_shape);
        let x0 = Tensor::randn(&shape, rng);
        let c = cond.map(|c| Tensor::stack(&vec![c.clone(); n])).transpose()?;
        let mut step = x0.clone();
        step.axpy(1.0, &field.velocity(&vec![0.0; n], &x0, c.as_ref())?)?;
        for row in step.unstack() {
            acc.axpy(1.0, &row)?;
        }
        done += n;
    }
    Ok(acc.scale(1.0 / n_draws as f64))
}
