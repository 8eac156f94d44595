//! Fixed-step integration of the learned flow from `t_start` to `t_end`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VelocityField;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Midpoint,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "midpoint" => Ok(Scheme::Midpoint),
            other => Err(Error::invalid(format!("unknown scheme `{other}` (euler|midpoint)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl SolverConfig {
    pub fn new(scheme: Scheme, steps: usize) -> Self {
        SolverConfig { scheme, steps, t_start: 0.0, t_end: 1.0 }
    }

    pub fn euler(steps: usize) -> Self {
        SolverConfig::new(Scheme::Euler, steps)
    }

    pub fn midpoint(steps: usize) -> Self {
        SolverConfig::new(Scheme::Midpoint, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("solver needs at least one step"));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::invalid("solver interval must have t_end > t_start"));
        }
        Ok(())
    }

    /// Velocity evaluations needed for one solve.
    pub fn evaluations(&self) -> usize {
        match self.scheme {
            Scheme::Euler => self.steps,
            Scheme::Midpoint => 2 * self.steps,
        }
    }
}

fn step(v: &dyn VelocityField, t: f64, h: f64, x: &Tensor, cond: Option<&Tensor>, scheme: Scheme) -> Result<Tensor> {
    let batch = x.shape()[0];
    let k1 = v.velocity(&vec![t; batch], x, cond)?;
    let mut next = x.clone();
    match scheme {
        Scheme::Euler => next.axpy(h, &k1)?,
        Scheme::Midpoint => {
            let mut mid = x.clone();
            mid.axpy(0.5 * h, &k1)?;
            let k2 = v.velocity(&vec![t + 0.5 * h; batch], &mid, cond)?;
            next.axpy(h, &k2)?;
        }
    }
    Ok(next)
}

/// Integrate `dx/dt = v(t, x | cond)` and return the final state.
pub fn solve(v: &dyn VelocityField, x0: &Tensor, cond: Option<&Tensor>, cfg: &SolverConfig) -> Result<Tensor> {
    cfg.validate()?;
    let h = (cfg.t_end - cfg.t_start) / cfg.steps as f64;
    let mut x = x0.clone();
    for k in 0..cfg.steps {
        let t = cfg.t_start + k as f64 * h;
        x = step(v, t, h, &x, cond, cfg.scheme).map_err(|e| annotate(e, k))?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("ODE step {k}")));
        }
    }
    Ok(x)
}

/// Like [`solve`], but records every intermediate state including both endpoints.
pub fn trajectory(
    v: &dyn VelocityField,
    x0: &Tensor,
    cond: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<Vec<(f64, Tensor)>> {
    cfg.validate()?;
    let h = (cfg.t_end - cfg.t_start) / cfg.steps as f64;
    let mut out = Vec::with_capacity(cfg.steps + 1);
    out.push((cfg.t_start, x0.clone()));
    let mut x = x0.clone();
    for k in 0..cfg.steps {
        let t = cfg.t_start + k as f64 * h;
        x = step(v, t, h, &x, cond, cfg.scheme).map_err(|e| annotate(e, k))?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("ODE step {k}")));
        }
        let t_next = if k + 1 == cfg.steps { cfg.t_end } else { cfg.t_start + (k + 1) as f64 * h };
        out.push((t_next, x.clone()));
    }
    Ok(out)
}

fn annotate(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} during ODE step {k}")),
        other => other,
    }
}

/// `solve` over a batch split into chunks that run in parallel.
///
/// Results are identical to a single `solve` call whenever the field treats
/// batch rows independently.
pub fn solve_batched(
    v: &dyn VelocityField,
    x0: &Tensor,
    cond: Option<&Tensor>,
    cfg: &SolverConfig,
    chunk: usize,
) -> Result<Tensor> {
    let n = x0.shape()[0];
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let len = chunk.min(n - s);
            let c = cond.map(|c| c.rows(s, len));
            solve(v, &x0.rows(s, len), c.as_ref(), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat0(&parts)
}

/// Wraps a field and counts how often it is evaluated.
pub struct CountingField<'a> {
    inner: &'a dyn VelocityField,
    calls: AtomicUsize,
}

impl<'a> CountingField<'a> {
    pub fn new(inner: &'a dyn VelocityField) -> Self {
        CountingField { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl VelocityField for CountingField<'_> {
    fn velocity(&self, t: &[f64], x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(t, x, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FnField;

    fn constant(c: f64) -> impl VelocityField {
        FnField(move |_t: &[f64], x: &Tensor, _c: Option<&Tensor>| Ok(Tensor::full(x.shape(), c)))
    }

    fn linear() -> impl VelocityField {
        FnField(|_t: &[f64], x: &Tensor, _c: Option<&Tensor>| Ok(x.clone()))
    }

    fn x0() -> Tensor {
        Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap()
    }

    #[test]
    fn constant_field_is_exact_for_both_schemes() {
        let v = constant(0.75);
        for cfg in [SolverConfig::euler(1), SolverConfig::euler(7), SolverConfig::midpoint(3)] {
            let x = solve(&v, &x0(), None, &cfg).unwrap();
            assert!((x.data()[0] - 1.75).abs() < 1e-14);
            assert!((x.data()[1] - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn euler_growth_factor_at_ten_steps() {
        let x = solve(&linear(), &x0(), None, &SolverConfig::euler(10)).unwrap();
        let factor = 1.1f64.powi(10);
        assert!((factor - 2.593742460100002).abs() < 1e-12);
        assert!((x.data()[0] - factor).abs() < 1e-12);
    }

    #[test]
    fn midpoint_growth_factor() {
        for n in [1usize, 4, 16] {
            let x = solve(&linear(), &x0(), None, &SolverConfig::midpoint(n)).unwrap();
            let h = 1.0 / n as f64;
            let factor = (1.0 + h + 0.5 * h * h).powi(n as i32);
            assert!((x.data()[0] - factor).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_records_every_state() {
        let traj = trajectory(&linear(), &x0(), None, &SolverConfig::euler(4)).unwrap();
        assert_eq!(traj.len(), 5);
        for (k, (t, x)) in traj.iter().enumerate() {
            assert!((t - k as f64 / 4.0).abs() < 1e-15);
            assert!((x.data()[0] - 1.25f64.powi(k as i32)).abs() < 1e-12);
        }
        let one = trajectory(&linear(), &x0(), None, &SolverConfig::euler(1)).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one[0].0, 0.0);
        assert_eq!(one[1].0, 1.0);
    }

    #[test]
    fn evaluations_are_counted() {
        let v = constant(1.0);
        for cfg in [SolverConfig::euler(10), SolverConfig::midpoint(5)] {
            let counted = CountingField::new(&v);
            solve(&counted, &x0(), None, &cfg).unwrap();
            assert_eq!(counted.calls(), cfg.evaluations());
        }
    }

    #[test]
    fn nan_reports_step() {
        let v = FnField(|t: &[f64], x: &Tensor, _c: Option<&Tensor>| {
            Ok(Tensor::full(x.shape(), if t[0] > 0.45 { f64::NAN } else { 0.0 }))
        });
        let err = solve(&v, &x0(), None, &SolverConfig::euler(10)).unwrap_err();
        assert!(err.to_string().contains("step 5"), "{err}");
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(solve(&linear(), &x0(), None, &SolverConfig::euler(0)).is_err());
    }
}
