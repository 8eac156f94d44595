use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update. `grads` follows parameter order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    lr: f64,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, gd) = (p.data_mut(), g.data());
        for i in 0..pd.len() {
            let mi = &mut m.data_mut()[i];
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gd[i];
            let mhat = *mi / bc1;
            let vi = &mut v.data_mut()[i];
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let vhat = *vi / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: &[f64]) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = single(&[0.0, 0.0, 0.0]);
        let g = Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap();
        let mut st = AdamState::default();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[g.clone()], 0.1, &cfg, &mut st).unwrap();
        // m_hat = g, v_hat = g^2 at step 1
        for (w, gi) in p.get("w").unwrap().data().iter().zip(g.data()) {
            let expected = -0.1 * gi / (gi.abs() + cfg.eps);
            assert!((w - expected).abs() < 1e-15);
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = single(&[1.0, 2.0]);
        let mut st = AdamState::default();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()], 0.1, &cfg, &mut st).unwrap();
        let before = p.clone();
        let m0 = st.first_moments()[0].data()[0];
        let v0 = st.second_moments()[0].data()[0];
        let mut p2 = before.clone();
        let mut st2 = st.clone();
        adam_step(&mut p2, &[Tensor::zeros(&[2])], 0.0, &cfg, &mut st2).unwrap();
        assert_eq!(p2, before);
        assert!((st2.first_moments()[0].data()[0] - 0.9 * m0).abs() < 1e-15);
        assert!((st2.second_moments()[0].data()[0] - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut p = single(&[1.0, 2.0]);
        let before = p.clone();
        let mut st = AdamState::default();
        adam_step(&mut p, &[Tensor::zeros(&[2])], 0.1, &AdamConfig::default(), &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut p = single(&[0.0; 8]);
        let mut st = AdamState::default();
        let cfg = AdamConfig::default();
        for _ in 0..200 {
            let w = p.get("w").unwrap();
            let g = w.map(|x| 2.0 * (x - 1.0));
            adam_step(&mut p, &[g], 0.05, &cfg, &mut st).unwrap();
        }
        let dist = p.get("w").unwrap().map(|x| x - 1.0).sq_norm().sqrt();
        assert!(dist < 1e-2, "distance {dist}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = single(&[0.0; 2]);
        let mut st = AdamState::default();
        let r = adam_step(&mut p, &[Tensor::zeros(&[3])], 0.1, &AdamConfig::default(), &mut st);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
