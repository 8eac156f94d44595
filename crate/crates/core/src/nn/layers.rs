//! Graph building blocks shared by the network architectures.

use rand::Rng;

use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
const MAX_PERIOD: f64 = 10_000.0;

/// `x @ w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let batch = g.shape(x)[0];
    let out = g.shape(w)[1];
    let y = g.matmul(x, w);
    let b = g.reshape(b, &[1, out]);
    let b = g.broadcast_to(b, &[batch, out]);
    g.add(y, b)
}

/// 3x3 same-padding convolution. `w: [C_out, C_in*9]`, `b: [C_out]`.
pub fn conv3x3(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let (batch, h, wd) = {
        let s = g.shape(x);
        (s[0], s[2], s[3])
    };
    let cout = g.shape(w)[0];
    let cols = g.im2col3(x);
    let y = g.matmul(w, cols);
    let y = g.reshape(y, &[cout, batch, h * wd]);
    let y = g.permute(y, &[1, 0, 2]);
    let y = g.reshape(y, &[batch, cout, h, wd]);
    add_channel_bias(g, y, b)
}

/// Add a per-channel bias `[C]` to `[B, C, H, W]`.
pub fn add_channel_bias(g: &mut Graph, x: Var, b: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let b = g.reshape(b, &[1, shape[1], 1, 1]);
    let b = g.broadcast_to(b, &shape);
    g.add(x, b)
}

/// Add a per-sample, per-channel shift `[B, C]` to `[B, C, H, W]`.
pub fn add_sample_channel_shift(g: &mut Graph, x: Var, shift: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let s = g.reshape(shift, &[shape[0], shape[1], 1, 1]);
    let s = g.broadcast_to(s, &shape);
    g.add(x, s)
}

/// Group normalization over `[B, C, H, W]` with learned per-channel affine.
pub fn group_norm(g: &mut Graph, x: Var, groups: usize, gamma: Var, beta: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let per_group: usize = shape[2..].iter().product::<usize>() * (c / groups);
    let grouped = g.reshape(x, &[b, groups, per_group]);
    let sum = g.sum_to(grouped, &[b, groups, 1]);
    let mean = g.scale(sum, 1.0 / per_group as f64);
    let mean = g.broadcast_to(mean, &[b, groups, per_group]);
    let centered = g.sub(grouped, mean);
    let sq = g.square(centered);
    let var = g.sum_to(sq, &[b, groups, 1]);
    let var = g.scale(var, 1.0 / per_group as f64);
    let var = g.add_scalar(var, NORM_EPS);
    let inv = g.powf(var, -0.5);
    let inv = g.broadcast_to(inv, &[b, groups, per_group]);
    let normed = g.mul(centered, inv);
    let normed = g.reshape(normed, &shape);
    let gm = g.reshape(gamma, &[1, c, 1, 1]);
    let gm = g.broadcast_to(gm, &shape);
    let scaled = g.mul(normed, gm);
    add_channel_bias(g, scaled, beta)
}

/// Sinusoidal features `[sin(s t f_i), cos(s t f_i)]` with geometric frequencies.
pub fn sinusoidal_embedding(t: &[f64], dim: usize, time_scale: f64) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
            data.push((time_scale * ti * freq).sin());
        }
        for i in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
            data.push((time_scale * ti * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

/// He-uniform initialization for a layer with the given fan-in.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}
