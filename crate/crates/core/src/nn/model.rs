use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    add_sample_channel_shift, conv3x3, group_norm, kaiming_uniform, linear, sinusoidal_embedding,
};
use crate::nn::{BoundParams, ModelParams};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// A time-dependent, optionally conditioned vector field `v_t(x | cond)`.
///
/// `x` is batched along its leading axis and `t` holds one time per sample.
pub trait VelocityField: Sync {
    fn velocity(&self, t: &[f64], x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor>;
}

/// Closure-backed field, mostly for analytic references and test teachers.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], &Tensor, Option<&Tensor>) -> Result<Tensor> + Sync,
{
    fn velocity(&self, t: &[f64], x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        (self.0)(t, x, cond)
    }
}

/// Shape of the UNet-lite: one 3x3 conv block per level on the way down,
/// a middle block, and one block per level on the way up after concatenating
/// the skip connection. Downsampling is 2x2 mean pooling, upsampling is
/// nearest neighbour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    /// Channels of the noisy state `x`.
    pub in_channels: usize,
    /// Channels of the conditioning field concatenated onto `x` (0 for none).
    pub cond_channels: usize,
    pub out_channels: usize,
    pub down_channels: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups_per_norm: usize,
    #[serde(default = "default_unet_time_scale")]
    pub time_scale: f64,
}

fn default_unet_time_scale() -> f64 {
    100.0
}

impl UNetSpec {
    pub fn new(in_channels: usize, cond_channels: usize, out_channels: usize, down_channels: Vec<usize>) -> Self {
        UNetSpec {
            in_channels,
            cond_channels,
            out_channels,
            down_channels,
            time_embed_dim: 64,
            groups_per_norm: 8,
            time_scale: default_unet_time_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_channels.is_empty() {
            return Err(Error::invalid("UNet needs at least one level"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("UNet channel counts must be positive"));
        }
        if self.groups_per_norm == 0 {
            return Err(Error::invalid("groups_per_norm must be positive"));
        }
        for &c in &self.down_channels {
            if c == 0 || c % self.groups_per_norm != 0 {
                return Err(Error::invalid(format!(
                    "level width {c} is not a positive multiple of {} groups",
                    self.groups_per_norm
                )));
            }
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be positive and even"));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.down_channels.len()
    }
}

/// Fully connected velocity net for flat (vector) states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default = "default_mlp_time_scale")]
    pub time_scale: f64,
}

fn default_mlp_time_scale() -> f64 {
    10.0
}

impl MlpSpec {
    pub fn new(in_dim: usize, cond_dim: usize, out_dim: usize, hidden: Vec<usize>) -> Self {
        MlpSpec {
            in_dim,
            cond_dim,
            out_dim,
            hidden,
            time_embed_dim: 16,
            time_scale: default_mlp_time_scale(),
        }
    }
}

/// `v(x) = scale * x + shift`, independent of time and conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalSpec {
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Unet(UNetSpec),
    Mlp(MlpSpec),
    Diagonal(DiagonalSpec),
}

impl Architecture {
    /// Freshly initialized parameters: He-uniform weights, zero biases and a
    /// zero output layer so the untrained velocity is exactly zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParams> {
        let mut p = ModelParams::new();
        match self {
            Architecture::Unet(s) => {
                s.validate()?;
                let d = s.time_embed_dim;
                p.insert("time.proj.weight", kaiming_uniform(&[d, d], d, rng))?;
                p.insert("time.proj.bias", Tensor::zeros(&[d]))?;
                let c0 = s.down_channels[0];
                let cin = s.in_channels + s.cond_channels;
                p.insert("conv_in.weight", kaiming_uniform(&[c0, cin * 9], cin * 9, rng))?;
                p.insert("conv_in.bias", Tensor::zeros(&[c0]))?;
                let mut prev = c0;
                for (i, &c) in s.down_channels.iter().enumerate() {
                    init_block(&mut p, &format!("down{i}"), prev, c, d, rng)?;
                    prev = c;
                }
                init_block(&mut p, "mid", prev, prev, d, rng)?;
                let mut h = prev;
                for i in (0..s.levels()).rev() {
                    let c = s.down_channels[i];
                    init_block(&mut p, &format!("up{i}"), h + c, c, d, rng)?;
                    h = c;
                }
                p.insert("conv_out.weight", Tensor::zeros(&[s.out_channels, c0 * 9]))?;
                p.insert("conv_out.bias", Tensor::zeros(&[s.out_channels]))?;
            }
            Architecture::Mlp(s) => {
                let mut prev = s.in_dim + s.cond_dim + s.time_embed_dim;
                for (i, &h) in s.hidden.iter().enumerate() {
                    p.insert(format!("mlp{i}.weight"), kaiming_uniform(&[prev, h], prev, rng))?;
                    p.insert(format!("mlp{i}.bias"), Tensor::zeros(&[h]))?;
                    prev = h;
                }
                p.insert("out.weight", Tensor::zeros(&[prev, s.out_dim]))?;
                p.insert("out.bias", Tensor::zeros(&[s.out_dim]))?;
            }
            Architecture::Diagonal(s) => {
                p.insert("scale", Tensor::zeros(&[s.dim]))?;
                p.insert("shift", Tensor::zeros(&[s.dim]))?;
            }
        }
        Ok(p)
    }

    /// Record the forward pass `v_t(x | cond)` on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        x: Var,
        t: &[f64],
        cond: Option<Var>,
    ) -> Result<Var> {
        let batch = g.shape(x)[0];
        if t.len() != batch {
            return Err(Error::shape(format!("{} times for a batch of {batch}", t.len())));
        }
        match self {
            Architecture::Unet(s) => unet_forward(s, g, params, x, t, cond),
            Architecture::Mlp(s) => mlp_forward(s, g, params, x, t, cond),
            Architecture::Diagonal(s) => {
                let flat = flatten(g, x, s.dim, "state")?;
                let shape = [batch, s.dim];
                let scale = params.get("scale")?;
                let scale = g.reshape(scale, &[1, s.dim]);
                let scale = g.broadcast_to(scale, &shape);
                let shift = params.get("shift")?;
                let shift = g.reshape(shift, &[1, s.dim]);
                let shift = g.broadcast_to(shift, &shape);
                let y = g.mul(flat, scale);
                let y = g.add(y, shift);
                let out_shape = g.shape(x).to_vec();
                Ok(g.reshape(y, &out_shape))
            }
        }
    }
}

fn init_block<R: Rng + ?Sized>(
    p: &mut ModelParams,
    prefix: &str,
    cin: usize,
    cout: usize,
    temb: usize,
    rng: &mut R,
) -> Result<()> {
    p.insert(format!("{prefix}.conv.weight"), kaiming_uniform(&[cout, cin * 9], cin * 9, rng))?;
    p.insert(format!("{prefix}.conv.bias"), Tensor::zeros(&[cout]))?;
    p.insert(format!("{prefix}.temb.weight"), kaiming_uniform(&[temb, cout], temb, rng))?;
    p.insert(format!("{prefix}.temb.bias"), Tensor::zeros(&[cout]))?;
    p.insert(format!("{prefix}.norm.gamma"), Tensor::full(&[cout], 1.0))?;
    p.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[cout]))?;
    Ok(())
}

fn flatten(g: &mut Graph, x: Var, dim: usize, what: &str) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape[1..].iter().product();
    if n != dim {
        return Err(Error::shape(format!("{what} of shape {shape:?} has {n} entries per sample, expected {dim}")));
    }
    Ok(g.reshape(x, &[shape[0], dim]))
}

fn block(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, temb: Var, groups: usize) -> Result<Var> {
    let h = conv3x3(g, x, p.get(&format!("{prefix}.conv.weight"))?, p.get(&format!("{prefix}.conv.bias"))?);
    let shift = linear(
        g,
        temb,
        p.get(&format!("{prefix}.temb.weight"))?,
        p.get(&format!("{prefix}.temb.bias"))?,
    );
    let h = add_sample_channel_shift(g, h, shift);
    let h = group_norm(
        g,
        h,
        groups,
        p.get(&format!("{prefix}.norm.gamma"))?,
        p.get(&format!("{prefix}.norm.beta"))?,
    );
    Ok(g.silu(h))
}

fn unet_forward(
    s: &UNetSpec,
    g: &mut Graph,
    p: &BoundParams,
    x: Var,
    t: &[f64],
    cond: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != s.in_channels {
        return Err(Error::shape(format!(
            "UNet expects x of shape [B, {}, H, W], got {shape:?}",
            s.in_channels
        )));
    }
    let (batch, h, w) = (shape[0], shape[2], shape[3]);
    let div = 1usize << s.levels();
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "spatial size {h}x{w} is not divisible by {div} ({} levels)",
            s.levels()
        )));
    }
    let input = match (cond, s.cond_channels) {
        (None, 0) => x,
        (Some(c), n) if n > 0 => {
            let cs = g.shape(c).to_vec();
            if cs != [batch, n, h, w] {
                return Err(Error::shape(format!(
                    "conditioning has shape {cs:?}, expected {:?}",
                    [batch, n, h, w]
                )));
            }
            g.concat(x, c, 1)
        }
        (None, n) => return Err(Error::shape(format!("UNet expects {n} conditioning channels, none given"))),
        (Some(_), _) => return Err(Error::shape("UNet has no conditioning input but one was given")),
    };
    let emb = g.constant(sinusoidal_embedding(t, s.time_embed_dim, s.time_scale));
    let temb = linear(g, emb, p.get("time.proj.weight")?, p.get("time.proj.bias")?);
    let temb = g.silu(temb);

    let mut hcur = conv3x3(g, input, p.get("conv_in.weight")?, p.get("conv_in.bias")?);
    let mut skips = Vec::with_capacity(s.levels());
    for i in 0..s.levels() {
        hcur = block(g, p, &format!("down{i}"), hcur, temb, s.groups_per_norm)?;
        skips.push(hcur);
        hcur = g.avg_pool2(hcur);
    }
    hcur = block(g, p, "mid", hcur, temb, s.groups_per_norm)?;
    for i in (0..s.levels()).rev() {
        hcur = g.upsample2(hcur);
        hcur = g.concat(hcur, skips[i], 1);
        hcur = block(g, p, &format!("up{i}"), hcur, temb, s.groups_per_norm)?;
    }
    Ok(conv3x3(g, hcur, p.get("conv_out.weight")?, p.get("conv_out.bias")?))
}

fn mlp_forward(
    s: &MlpSpec,
    g: &mut Graph,
    p: &BoundParams,
    x: Var,
    t: &[f64],
    cond: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let batch = shape[0];
    let mut h = flatten(g, x, s.in_dim, "state")?;
    match (cond, s.cond_dim) {
        (None, 0) => {}
        (Some(c), n) if n > 0 => {
            let c = flatten(g, c, n, "conditioning")?;
            h = g.concat(h, c, 1);
        }
        (None, n) => return Err(Error::shape(format!("MLP expects {n} conditioning entries, none given"))),
        (Some(_), _) => return Err(Error::shape("MLP has no conditioning input but one was given")),
    }
    if s.time_embed_dim > 0 {
        let emb = g.constant(sinusoidal_embedding(t, s.time_embed_dim, s.time_scale));
        h = g.concat(h, emb, 1);
    }
    for i in 0..s.hidden.len() {
        h = linear(g, h, p.get(&format!("mlp{i}.weight"))?, p.get(&format!("mlp{i}.bias"))?);
        h = g.silu(h);
    }
    let y = linear(g, h, p.get("out.weight")?, p.get("out.bias")?);
    if s.out_dim == s.in_dim {
        Ok(g.reshape(y, &shape))
    } else {
        Ok(g.reshape(y, &[batch, s.out_dim]))
    }
}

/// An architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    pub arch: Architecture,
    pub params: ModelParams,
}

impl VelocityModel {
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let params = arch.init_params(rng)?;
        Ok(VelocityModel { arch, params })
    }

    pub fn from_parts(arch: Architecture, params: ModelParams) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = arch.init_params(&mut rng)?;
        if !reference.same_layout(&params) {
            return Err(Error::shape("parameters do not match the architecture"));
        }
        Ok(VelocityModel { arch, params })
    }

    /// Record the forward pass with this model's parameters bound as leaves.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        t: &[f64],
        cond: Option<Var>,
    ) -> Result<Var> {
        self.arch.forward(g, bound, x, t, cond)
    }

    /// Inference without gradient bookkeeping.
    pub fn forward(&self, x: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let cv = cond.map(|c| g.constant(c.clone()));
        let out = self.arch.forward(&mut g, &bound, xv, t, cv)?;
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    /// Write the FMCK checkpoint to `path` and the architecture next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let json = serde_json::to_string_pretty(&self.arch)
            .map_err(|e| Error::Format(format!("architecture serialization: {e}")))?;
        std::fs::write(arch_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = ModelParams::load(path)?;
        let json = std::fs::read_to_string(arch_path(path))?;
        let arch: Architecture = serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("architecture file: {e}")))?;
        VelocityModel::from_parts(arch, params)
    }
}

/// Sidecar holding the architecture of a checkpoint: `model.fmck` -> `model.arch.json`.
pub fn arch_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("arch.json")
}

impl VelocityField for VelocityModel {
    fn velocity(&self, t: &[f64], x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.forward(x, t, cond)
    }
}

/// `∇_x Σ_i v_0(x | cond)_i`: the input gradient of the summed-output critic.
pub fn input_gradient(model: &VelocityModel, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params, false);
    let xv = g.leaf(x.clone(), true);
    let cv = cond.map(|c| g.constant(c.clone()));
    let t = vec![0.0; x.shape()[0]];
    let out = model.forward_graph(&mut g, &bound, xv, &t, cv)?;
    let d = g.sum_all(out);
    Ok(g.gradients(d, &[xv])?.remove(0))
}
