use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, BoundParams, ModelParams};
use crate::tape::{Graph, Var};
use crate::FlowRng;

/// Step count and learning-rate schedule of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Learning rate at the last step as a fraction of `lr` (linear decay).
    pub lr_final_frac: f64,
    pub adam: AdamConfig,
    /// Record wall-clock milliseconds in the loss trace.
    pub record_wall_time: bool,
}

impl OptimSettings {
    pub fn new(steps: usize, lr: f64, batch_size: usize) -> Self {
        OptimSettings {
            steps,
            lr,
            batch_size,
            lr_final_frac: 1.0,
            adam: AdamConfig::default(),
            record_wall_time: true,
        }
    }

    pub fn with_decay(mut self, final_frac: f64) -> Self {
        self.lr_final_frac = final_frac;
        self
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.lr * (1.0 - (1.0 - self.lr_final_frac) * frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<LossRow>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over rows `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.rows[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,loss,wall_ms")?;
        for r in &self.rows {
            writeln!(w, "{},{:e},{}", r.step, r.loss, r.wall_ms)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Minimize a scalar loss over `params` with Adam.
///
/// `loss_fn` records the loss on a fresh graph each step, reading the
/// parameters through the bound leaves.
pub fn optimize<F>(params: &mut ModelParams, settings: &OptimSettings, rng: &mut FlowRng, mut loss_fn: F) -> Result<LossTrace>
where
    F: FnMut(&mut Graph, &BoundParams, &mut FlowRng) -> Result<Var>,
{
    let start = Instant::now();
    let mut state = AdamState::default();
    let mut trace = LossTrace::default();
    for step in 0..settings.steps {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, true);
        let loss = loss_fn(&mut g, &bound, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() || g.check_finite().is_err() {
            return Err(Error::NonFinite(format!("loss at training step {step}")));
        }
        let grads = g.gradients(loss, &bound.vars())?;
        adam_step(params, &grads, settings.lr_at(step), &settings.adam, &mut state)?;
        let wall_ms = if settings.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        trace.rows.push(LossRow { step, loss: value, wall_ms });
    }
    Ok(trace)
}
