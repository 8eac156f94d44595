//! Central finite-difference checks of reverse-mode gradients.

use flowcast::nn::{layers, Architecture, BoundParams, VelocityModel};
use flowcast::tape::{Graph, Var};
use flowcast::{rng_from_seed, FlowRng, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Where random inputs are drawn from.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    Any,
    Positive,
    /// `|x| >= 0.1`, for ops with a kink at zero.
    AwayFromZero,
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub domain: Domain,
    pub build: fn(&mut Graph, &[Var]) -> Var,
}

impl OpCase {
    fn new(name: &'static str, inputs: &[&[usize]], domain: Domain, build: fn(&mut Graph, &[Var]) -> Var) -> Self {
        OpCase { name, inputs: inputs.iter().map(|s| s.to_vec()).collect(), domain, build }
    }
}

pub fn draw(shape: &[usize], domain: Domain, rng: &mut FlowRng) -> Tensor {
    let mut t = Tensor::uniform(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        *v = match domain {
            Domain::Any => *v,
            Domain::Positive => 0.5 + 1.5 * v.abs(),
            Domain::AwayFromZero => v.signum() * (0.1 + 0.9 * v.abs()),
        };
    }
    t
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Scalar probe `Σ out ⊙ c` of the op applied to `inputs`.
fn probe(case: &OpCase, inputs: &[Tensor], c: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars);
    g.value(out).data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error over all inputs of one random instance.
pub fn check_instance(case: &OpCase, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let inputs: Vec<Tensor> = case.inputs.iter().map(|s| draw(s, case.domain, &mut rng)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars);
    let c = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let cv = g.constant(c.clone());
    let prod = g.mul(out, cv);
    let loss = g.sum_all(prod);
    let grads = g.gradients(loss, &vars).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (probe(case, &plus, &c) - probe(case, &minus, &c)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(grad.data(), &numeric));
    }
    worst
}

/// Every differentiable graph op, plus the layer compositions and a
/// gradient-of-gradient probe.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        OpCase::new("add", &[&[3, 4], &[3, 4]], Any, |g, v| g.add(v[0], v[1])),
        OpCase::new("sub", &[&[3, 4], &[3, 4]], Any, |g, v| g.sub(v[0], v[1])),
        OpCase::new("mul", &[&[3, 4], &[3, 4]], Any, |g, v| g.mul(v[0], v[1])),
        OpCase::new("scale", &[&[5]], Any, |g, v| g.scale(v[0], -1.7)),
        OpCase::new("neg", &[&[5]], Any, |g, v| g.neg(v[0])),
        OpCase::new("add_scalar", &[&[5]], Any, |g, v| g.add_scalar(v[0], 0.3)),
        OpCase::new("powf", &[&[6]], Positive, |g, v| g.powf(v[0], -0.5)),
        OpCase::new("square", &[&[6]], Any, |g, v| g.square(v[0])),
        OpCase::new("sigmoid", &[&[6]], Any, |g, v| g.sigmoid(v[0])),
        OpCase::new("relu", &[&[6]], AwayFromZero, |g, v| g.relu(v[0])),
        OpCase::new("silu", &[&[6]], Any, |g, v| g.silu(v[0])),
        OpCase::new("matmul", &[&[3, 4], &[4, 2]], Any, |g, v| g.matmul(v[0], v[1])),
        OpCase::new("matmul_ta", &[&[4, 3], &[4, 2]], Any, |g, v| g.matmul_t(v[0], v[1], true, false)),
        OpCase::new("matmul_tb", &[&[3, 4], &[2, 4]], Any, |g, v| g.matmul_t(v[0], v[1], false, true)),
        OpCase::new("matmul_tab", &[&[4, 3], &[2, 4]], Any, |g, v| g.matmul_t(v[0], v[1], true, true)),
        OpCase::new("reshape", &[&[2, 6]], Any, |g, v| g.reshape(v[0], &[3, 4])),
        OpCase::new("permute", &[&[2, 3, 4]], Any, |g, v| g.permute(v[0], &[2, 0, 1])),
        OpCase::new("im2col3", &[&[2, 2, 4, 3]], Any, |g, v| g.im2col3(v[0])),
        OpCase::new("col2im3", &[&[18, 24]], Any, |g, v| g.col2im3(v[0], &[2, 2, 4, 3])),
        OpCase::new("avg_pool2", &[&[2, 2, 4, 6]], Any, |g, v| g.avg_pool2(v[0])),
        OpCase::new("upsample2", &[&[2, 2, 2, 3]], Any, |g, v| g.upsample2(v[0])),
        OpCase::new("sum_all", &[&[3, 4]], Any, |g, v| g.sum_all(v[0])),
        OpCase::new("mean_all", &[&[3, 4]], Any, |g, v| g.mean_all(v[0])),
        OpCase::new("sum_to", &[&[2, 3, 4]], Any, |g, v| g.sum_to(v[0], &[2, 1, 4])),
        OpCase::new("broadcast_to", &[&[1, 3, 1]], Any, |g, v| g.broadcast_to(v[0], &[2, 3, 4])),
        OpCase::new("concat", &[&[2, 3], &[2, 2]], Any, |g, v| g.concat(v[0], v[1], 1)),
        OpCase::new("slice", &[&[4, 5]], Any, |g, v| g.slice(v[0], 1, 1, 3)),
        OpCase::new("pad_slice", &[&[4, 2]], Any, |g, v| g.pad_slice(v[0], 1, 2, 5)),
        OpCase::new("linear", &[&[3, 4], &[4, 5], &[5]], Any, |g, v| layers::linear(g, v[0], v[1], v[2])),
        OpCase::new("conv3x3", &[&[2, 3, 4, 4], &[2, 27], &[2]], Any, |g, v| {
            layers::conv3x3(g, v[0], v[1], v[2])
        }),
        OpCase::new("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], Any, |g, v| {
            layers::group_norm(g, v[0], 2, v[1], v[2])
        }),
        OpCase::new("channel_shift", &[&[2, 3, 2, 2], &[2, 3]], Any, |g, v| {
            layers::add_sample_channel_shift(g, v[0], v[1])
        }),
        OpCase::new("double_backward", &[&[3, 4], &[4, 2]], Any, |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.silu(y);
            let s = g.sum_all(y);
            let gx = g.backward(s, &[v[0]]).expect("inner backward").remove(0);
            g.square(gx)
        }),
    ]
}

/// A model with every parameter randomized, including the zero-initialized
/// output layer, so no gradient is trivially zero.
pub fn random_model(arch: Architecture, seed: u64) -> VelocityModel {
    let mut rng = rng_from_seed(seed);
    let mut m = VelocityModel::init(arch, &mut rng).expect("init");
    for v in m.params.values_mut() {
        *v = Tensor::uniform(v.shape(), -0.5, 0.5, &mut rng);
    }
    m
}

fn model_probe(m: &VelocityModel, x: &Tensor, t: &[f64], cond: Option<&Tensor>, c: &Tensor) -> f64 {
    let out = m.forward(x, t, cond).expect("forward");
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error of parameter and input gradients of `Σ v ⊙ c`.
pub fn check_model(m: &VelocityModel, x: &Tensor, cond: Option<&Tensor>, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let t: Vec<f64> = (0..x.shape()[0]).map(|_| rng.random::<f64>()).collect();
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &m.params, true);
    let xv = g.leaf(x.clone(), true);
    let cv = cond.map(|c| g.leaf(c.clone(), true));
    let out = m.forward_graph(&mut g, &bound, xv, &t, cv).expect("forward graph");
    let c = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let ck = g.constant(c.clone());
    let prod = g.mul(out, ck);
    let loss = g.sum_all(prod);
    let mut wrt = bound.vars();
    wrt.push(xv);
    wrt.extend(cv);
    let grads = g.gradients(loss, &wrt).expect("backward");

    let mut worst: f64 = 0.0;
    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    for (k, name) in names.iter().enumerate() {
        let n = m.params.get(name).expect("param").numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = m.clone();
            plus.params.get_mut(name).expect("param").data_mut()[j] += FD_STEP;
            let mut minus = m.clone();
            minus.params.get_mut(name).expect("param").data_mut()[j] -= FD_STEP;
            *slot = (model_probe(&plus, x, &t, cond, &c) - model_probe(&minus, x, &t, cond, &c)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(grads[k].data(), &numeric));
    }
    let mut inputs = vec![x.clone()];
    inputs.extend(cond.cloned());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[j] += delta;
                model_probe(m, &moved[0], &t, moved.get(1), &c)
            };
            *slot = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(grads[names.len() + i].data(), &numeric));
    }
    worst
}
