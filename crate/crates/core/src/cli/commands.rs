use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::distill::{self, AddConfig, TeacherSettings};
use crate::dynsys::{self, augment, Dataset, Field, GeneratorKind, GeneratorSpec, Normalization, Sampler, Trajectory};
use crate::error::{Error, Result};
use crate::flowmatch::{self, PairSet};
use crate::metrics::{self, Boundary, MetricsRow, SpectrumResult};
use crate::nn::{Architecture, LossTrace, OptimSettings, UNetSpec, VelocityModel};
use crate::odesolve::{CountingField, Scheme, SolverConfig};
use crate::tensor::Tensor;
use crate::{rng_from_seed, FlowRng};

pub(super) struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    fn finish(&self) -> Result<()> {
        std::fs::write(self.out.join("config.resolved"), self.cfg.snapshot(self.seed))?;
        Ok(())
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        let raw = self.cfg.raw(key);
        if raw.is_empty() {
            return Err(Error::invalid(format!("config key `{key}` is required")));
        }
        Ok(PathBuf::from(raw))
    }
}

pub(super) const GEN_DATA_KEYS: &[(&str, &str)] = &[
    ("generator", "rotating_blob"),
    ("n_traj", "11"),
    ("len", "64"),
    ("test_fraction", "0.18"),
    ("height", ""),
    ("width", ""),
    ("noise_scale", ""),
    ("inner_substeps", ""),
    ("viscosity", ""),
    ("dt_sim", ""),
    ("angle_per_step", ""),
    ("hidden_factor", ""),
    ("density_contrast", ""),
];

pub(super) const TRAIN_KEYS: &[(&str, &str)] = &[
    ("method", "fm"),
    ("dataset", ""),
    ("steps", "2000"),
    ("lr", "1e-5"),
    ("lr_final_frac", "1"),
    ("batch", "16"),
    ("channels", "32,64"),
    ("time_embed_dim", "64"),
    ("groups", "8"),
    ("log_wall_time", "true"),
];

pub(super) const DISTILL_KEYS: &[(&str, &str)] = &[
    ("method", "direct"),
    ("teacher", ""),
    ("dataset", ""),
    ("steps", "1000"),
    ("lr", "1e-5"),
    ("lr_final_frac", "1"),
    ("batch", "16"),
    ("solver", ""),
    ("solver_steps", "10"),
    ("pool_size", "256"),
    ("n", "16"),
    ("lambda", ""),
    ("gamma", "5"),
    ("d_to_g", "5"),
    ("lr_d", ""),
    ("log_wall_time", "true"),
];

pub(super) const ROLLOUT_KEYS: &[(&str, &str)] = &[
    ("ckpt", ""),
    ("dataset", ""),
    ("sampler", "fm"),
    ("scheme", "euler"),
    ("steps", "10"),
    ("y0", "0"),
    ("k", "5"),
    ("n_seeds", "4"),
    ("initial_conditions", "0"),
    ("pgm_channels", "0"),
];

pub(super) const EVALUATE_KEYS: &[(&str, &str)] =
    &[("real", ""), ("pred", ""), ("boundary", "periodic"), ("method", "")];

fn optim(cfg: &RunConfig) -> Result<OptimSettings> {
    let mut s = OptimSettings::new(cfg.get("steps")?, cfg.get("lr")?, cfg.get("batch")?).with_decay(cfg.get("lr_final_frac")?);
    s.record_wall_time = cfg.get("log_wall_time")?;
    if s.batch_size == 0 || !(s.lr > 0.0) {
        return Err(Error::invalid("batch must be positive and lr > 0"));
    }
    Ok(s)
}

pub(super) fn gen_data(mut ctx: Context) -> Result<()> {
    let kind: GeneratorKind = ctx.cfg.get("generator")?;
    let mut spec = GeneratorSpec::new(kind);
    macro_rules! field {
        ($key:literal, $f:ident) => {
            if ctx.cfg.raw($key).is_empty() {
                ctx.cfg.resolve($key, spec.$f);
            } else {
                spec.$f = ctx.cfg.get($key)?;
            }
        };
    }
    field!("height", height);
    field!("width", width);
    field!("noise_scale", noise_scale);
    field!("inner_substeps", inner_substeps);
    field!("viscosity", viscosity);
    field!("dt_sim", dt_sim);
    field!("angle_per_step", angle_per_step);
    field!("hidden_factor", hidden_factor);
    field!("density_contrast", density_contrast);
    let n: usize = ctx.cfg.get("n_traj")?;
    let len: usize = ctx.cfg.get("len")?;
    let mut rng = rng_from_seed(ctx.seed);
    let all = dynsys::generate(&spec, n, len, &mut rng)?;
    let frac: f64 = ctx.cfg.get("test_fraction")?;
    let (train, test) = if n >= 2 { dynsys::split_train_test(all, frac, &mut rng)? } else { (all, Vec::new()) };
    let norm = Normalization::fit(&train)?;
    let train_ds = Dataset::new(train, norm.clone())?;
    train_ds.save(&ctx.out.join("train.fmds"))?;
    let n_test = test.len();
    if !test.is_empty() {
        Dataset::new(test, norm.clone())?.save(&ctx.out.join("test.fmds"))?;
    }
    let (c, h, w) = train_ds.shape();
    println!("generator {}: {} train / {} test trajectories of {len} states, {c}x{h}x{w}", kind.name(), train_ds.trajectories.len(), n_test);
    println!("normalization mean {:?} std {:?}", norm.mean, norm.std);
    ctx.finish()
}

fn unet_for(ds: &Dataset, cfg: &RunConfig) -> Result<Architecture> {
    let (c, h, w) = ds.shape();
    let mut spec = UNetSpec::new(c, c + 2, c, cfg.list("channels")?);
    spec.time_embed_dim = cfg.get("time_embed_dim")?;
    spec.groups_per_norm = cfg.get("groups")?;
    spec.validate()?;
    let f = 1usize << spec.down_channels.len();
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!("spatial size {h}x{w} is not divisible by {f}")));
    }
    Ok(Architecture::Unet(spec))
}

fn load_pairs(path: &Path) -> Result<(Dataset, PairSet)> {
    let ds = Dataset::load(path)?;
    let pairs = dynsys::transition_pairs(&ds.trajectories, &ds.norm)?;
    Ok((ds, pairs))
}

/// Fail early with a shape error when `model` cannot consume the data.
fn check_model(model: &VelocityModel, pairs: &PairSet) -> Result<()> {
    let b = pairs.gather(&[0])?;
    let out = model.forward(&b.target, &[0.0], b.cond.as_ref())?;
    out.expect_shape(b.target.shape())
}

fn save_trace(trace: &LossTrace, path: &Path) -> Result<()> {
    trace.write_csv(path)?;
    if let Some(last) = trace.rows.last() {
        println!("{}: {} steps, final loss {:.4e}", path.display(), trace.rows.len(), last.loss);
    }
    Ok(())
}

pub(super) fn train(ctx: Context) -> Result<()> {
    let method = ctx.cfg.raw("method").to_string();
    let (ds, pairs) = load_pairs(&ctx.path("dataset")?)?;
    let settings = optim(&ctx.cfg)?;
    let mut rng = rng_from_seed(ctx.seed);
    let init = VelocityModel::init(unet_for(&ds, &ctx.cfg)?, &mut rng)?;
    check_model(&init, &pairs)?;
    let (model, trace) = match method.as_str() {
        "fm" => flowmatch::train_fm(&init, &pairs, &settings, &mut rng)?,
        "det" => flowmatch::train_deterministic(&init, &pairs, &settings, &mut rng)?,
        m => return Err(Error::invalid(format!("unknown train method `{m}` (fm | det)"))),
    };
    model.save(&ctx.out.join("model.fmck"))?;
    save_trace(&trace, &ctx.out.join("loss.csv"))?;
    ctx.finish()
}

fn reject_keys(cfg: &RunConfig, method: &str, keys: &[&str]) -> Result<()> {
    for k in keys {
        if cfg.is_explicit(k) {
            return Err(Error::invalid(format!("config key `{k}` does not apply to method `{method}`")));
        }
    }
    Ok(())
}

fn teacher_settings(ctx: &mut Context, default_scheme: Scheme) -> Result<TeacherSettings> {
    let scheme = if ctx.cfg.raw("solver").is_empty() {
        ctx.cfg.resolve("solver", default_scheme);
        default_scheme
    } else {
        ctx.cfg.get("solver")?
    };
    let solver = SolverConfig::new(scheme, ctx.cfg.get("solver_steps")?);
    solver.validate()?;
    Ok(TeacherSettings::new(solver, ctx.cfg.get("pool_size")?))
}

pub(super) fn distill(mut ctx: Context) -> Result<()> {
    let method = ctx.cfg.raw("method").to_string();
    let teacher = VelocityModel::load(&ctx.path("teacher")?)?;
    let (_, pairs) = load_pairs(&ctx.path("dataset")?)?;
    check_model(&teacher, &pairs)?;
    let settings = optim(&ctx.cfg)?;
    let mut rng = rng_from_seed(ctx.seed);
    const ADD_ONLY: [&str; 4] = ["lambda", "gamma", "d_to_g", "lr_d"];
    match method.as_str() {
        "direct" | "rectify" => {
            reject_keys(&ctx.cfg, &method, &ADD_ONLY)?;
            reject_keys(&ctx.cfg, &method, &["n"])?;
            let ts = teacher_settings(&mut ctx, Scheme::Midpoint)?;
            let (model, trace) = if method == "direct" {
                let (head, trace) = distill::direct_distill(&teacher, &teacher, &pairs, &ts, &settings, &mut rng)?;
                (head.model, trace)
            } else {
                distill::rectify(&teacher, &pairs, &ts, &settings, &mut rng)?
            };
            model.save(&ctx.out.join("model.fmck"))?;
            save_trace(&trace, &ctx.out.join("loss.csv"))?;
        }
        "progressive" => {
            reject_keys(&ctx.cfg, &method, &ADD_ONLY)?;
            reject_keys(&ctx.cfg, &method, &["solver", "solver_steps", "pool_size"])?;
            let n: usize = ctx.cfg.get("n")?;
            let stages = distill::progressive_distill(&teacher, &teacher, &pairs, n, &settings, &mut rng)?;
            let mut summary = String::from("m,residual\n");
            for s in &stages {
                s.model.save(&ctx.out.join(format!("stage_m{}.fmck", s.m)))?;
                summary.push_str(&format!("{},{:e}\n", s.m, s.residual));
                println!("stage m={}: residual {:.4e}", s.m, s.residual);
            }
            std::fs::write(ctx.out.join("stages.csv"), summary)?;
        }
        "add" | "wgan" => {
            reject_keys(&ctx.cfg, &method, &["n"])?;
            let lambda: f64 = if method == "wgan" {
                if ctx.cfg.is_explicit("lambda") && ctx.cfg.get::<f64>("lambda")? != 0.0 {
                    return Err(Error::invalid("method `wgan` fixes lambda = 0; use `add` for other values"));
                }
                0.0
            } else if ctx.cfg.raw("lambda").is_empty() {
                0.5
            } else {
                ctx.cfg.get("lambda")?
            };
            ctx.cfg.resolve("lambda", lambda);
            let lr_d = if ctx.cfg.raw("lr_d").is_empty() { settings.lr } else { ctx.cfg.get("lr_d")? };
            ctx.cfg.resolve("lr_d", lr_d);
            let cfg = AddConfig {
                lambda,
                gamma: ctx.cfg.get("gamma")?,
                d_to_g_ratio: ctx.cfg.get("d_to_g")?,
                lr_g: settings.lr,
                lr_d,
            };
            let ts = teacher_settings(&mut ctx, Scheme::Euler)?;
            let out = distill::add_train(&teacher, &teacher, &pairs, &cfg, &ts, settings.steps, settings.batch_size, &mut rng)?;
            out.generator.model.save(&ctx.out.join("model.fmck"))?;
            out.discriminator.model.save(&ctx.out.join("discriminator.fmck"))?;
            distill::write_add_log(&out.log, &ctx.out.join("loss.csv"))?;
            if let Some(r) = out.log.last() {
                println!("{method}: {} generator updates, G loss {:.4e}, D loss {:.4e}", out.log.len(), r.loss_total, r.loss_d);
            }
        }
        m => return Err(Error::invalid(format!("unknown distill method `{m}` (direct | progressive | rectify | add | wgan)"))),
    }
    ctx.finish()
}

/// Side information written next to `pred.fmds`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RolloutInfo {
    pub sampler: String,
    pub scheme: String,
    pub solver_steps: usize,
    pub k: usize,
    pub y0: usize,
    pub evaluations_per_step: usize,
    pub evaluations_per_trajectory: usize,
    /// `(test trajectory index, seed index)` of every predicted trajectory.
    pub trajectories: Vec<(usize, usize)>,
}

fn write_pgm(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    std::fs::write(path.with_extension("scale"), format!("min={lo:e}\nmax={hi:e}\n"))?;
    Ok(())
}

pub(super) fn rollout(ctx: Context) -> Result<()> {
    let model = VelocityModel::load(&ctx.path("ckpt")?)?;
    let ds = Dataset::load(&ctx.path("dataset")?)?;
    let sampler_name = ctx.cfg.raw("sampler").to_string();
    let scheme: Scheme = ctx.cfg.get("scheme")?;
    let solver = SolverConfig::new(scheme, ctx.cfg.get("steps")?);
    let k: usize = ctx.cfg.get("k")?;
    let y0: usize = ctx.cfg.get("y0")?;
    let n_seeds: usize = ctx.cfg.get("n_seeds")?;
    let mut n_ic: usize = ctx.cfg.get("initial_conditions")?;
    if n_ic == 0 || n_ic > ds.trajectories.len() {
        n_ic = ds.trajectories.len();
    }
    if y0 + k >= ds.len() {
        return Err(Error::invalid(format!("y0 + k = {} exceeds the trajectory length {}", y0 + k, ds.len())));
    }
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be positive"));
    }
    let counting = CountingField::new(&model);
    let sampler = match sampler_name.as_str() {
        "fm" => {
            solver.validate()?;
            Sampler::Flow { field: &counting, solver }
        }
        "onestep" => Sampler::OneStep(&counting),
        "det" => Sampler::Deterministic(&counting),
        s => return Err(Error::invalid(format!("unknown sampler `{s}` (fm | onestep | det)"))),
    };
    let tau_max = (ds.len() - 1) as f64 * ds.dt_sim();
    {
        let y = &ds.trajectories[0].states[y0];
        let cond = dynsys::conditioning(y, &ds.norm, tau_max)?;
        let c = cond.shape()[0];
        let cond = cond.reshape(&[1, c, y.height(), y.width()])?;
        model
            .forward(&Tensor::zeros(&[1, y.roles.len(), y.height(), y.width()]), &[0.0], Some(&cond))?
            .expect_shape(&[1, y.roles.len(), y.height(), y.width()])?;
    }
    let mut rng = rng_from_seed(ctx.seed);
    let jobs: Vec<(usize, usize, u64)> =
        (0..n_ic).flat_map(|i| (0..n_seeds).map(move |s| (i, s))).map(|(i, s)| (i, s, rng.random())).collect();
    let trajs = jobs
        .par_iter()
        .map(|&(i, _, seed)| -> Result<Trajectory> {
            let y = &ds.trajectories[i].states[y0];
            let start = augment(y, y.sim_time, tau_max)?;
            let mut r: FlowRng = rng_from_seed(seed);
            let tr = dynsys::rollout(&sampler, &start, &ds.norm, ds.dt_sim(), tau_max, k, &mut r).map_err(|e| e.error)?;
            let states = tr.states.iter().map(Field::physical).collect();
            Ok(Trajectory { states, ..tr })
        })
        .collect::<Result<Vec<_>>>()?;
    let calls = counting.calls();
    let per_traj = calls / jobs.len();
    let info = RolloutInfo {
        sampler: sampler_name,
        scheme: scheme.to_string(),
        solver_steps: solver.steps,
        k,
        y0,
        evaluations_per_step: sampler.evaluations_per_step(),
        evaluations_per_trajectory: per_traj,
        trajectories: jobs.iter().map(|&(i, s, _)| (i, s)).collect(),
    };
    let frames = ctx.out.join("frames");
    std::fs::create_dir_all(&frames)?;
    let channels: Vec<usize> = ctx.cfg.list("pgm_channels")?;
    for (step, s) in trajs[0].states.iter().enumerate() {
        let n = s.height() * s.width();
        for &c in &channels {
            if c >= s.roles.len() {
                return Err(Error::invalid(format!("pgm channel {c} out of range")));
            }
            let vals = &s.channels.data()[c * n..(c + 1) * n];
            write_pgm(vals, s.height(), s.width(), &frames.join(format!("step{step}_ch{c}.pgm")))?;
        }
    }
    Dataset::new(trajs, ds.norm.clone())?.save(&ctx.out.join("pred.fmds"))?;
    let json = serde_json::to_string_pretty(&info).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(ctx.out.join("rollout.json"), json + "\n")?;
    println!(
        "{} trajectories of {k} steps; {} model evaluations per trajectory ({} per step)",
        info.trajectories.len(),
        per_traj,
        info.evaluations_per_step
    );
    ctx.finish()
}

fn average_spectra(items: &[SpectrumResult]) -> SpectrumResult {
    let n = items.len() as f64;
    let mut out = items[0].clone();
    for (i, v) in out.energy_density.iter_mut().enumerate() {
        *v = items.iter().map(|s| s.energy_density[i]).sum::<f64>() / n;
    }
    out
}

pub(super) fn evaluate(mut ctx: Context) -> Result<()> {
    let real = Dataset::load(&ctx.path("real")?)?;
    let pred_path = ctx.path("pred")?;
    let pred = Dataset::load(&pred_path)?;
    let info_path = pred_path.with_file_name("rollout.json");
    let info: RolloutInfo = serde_json::from_str(&std::fs::read_to_string(&info_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", info_path.display())))?;
    let boundary: Boundary = ctx.cfg.get("boundary")?;
    if ctx.cfg.raw("method").is_empty() {
        ctx.cfg.resolve("method", &info.sampler);
    }
    let method = ctx.cfg.raw("method").to_string();
    if info.trajectories.len() != pred.trajectories.len() {
        return Err(Error::shape("rollout.json does not match the predicted trajectories"));
    }
    let per_seed = ctx.out.join("per_seed");
    let spectra = ctx.out.join("spectra");
    std::fs::create_dir_all(&per_seed)?;
    std::fs::create_dir_all(&spectra)?;
    let mut tables = Vec::new();
    let mut spec_pred: Vec<Vec<SpectrumResult>> = vec![Vec::new(); pred.len()];
    let mut spec_real: Vec<Vec<SpectrumResult>> = vec![Vec::new(); pred.len()];
    for (p, &(ri, si)) in pred.trajectories.iter().zip(&info.trajectories) {
        let src = real.trajectories.get(ri).ok_or_else(|| Error::shape(format!("no real trajectory {ri}")))?;
        if info.y0 + p.len() > src.len() {
            return Err(Error::shape(format!("prediction of {} states starting at {} overruns the real data", p.len(), info.y0)));
        }
        let r = Trajectory { states: src.states[info.y0..info.y0 + p.len()].to_vec(), ..src.clone() };
        let table = metrics::evaluate_rollout(&r, p, boundary)?;
        std::fs::write(per_seed.join(format!("traj{ri}_seed{si}.csv")), metrics::metrics_csv(&table))?;
        tables.push(table);
        for (k, (a, b)) in p.states.iter().zip(&r.states).enumerate() {
            spec_pred[k].push(metrics::energy_spectrum(a)?);
            spec_real[k].push(metrics::energy_spectrum(b)?);
        }
    }
    let mean: Vec<MetricsRow> = metrics::average_tables(&tables)?;
    std::fs::write(ctx.out.join("metrics.csv"), metrics::metrics_csv(&mean))?;
    for k in 0..pred.len() {
        average_spectra(&spec_pred[k]).write_csv(&spectra.join(format!("{method}_step{k}.csv")))?;
        average_spectra(&spec_real[k]).write_csv(&spectra.join(format!("real_step{k}.csv")))?;
    }
    if let Some(last) = mean.last() {
        println!(
            "{method}: step {} ke_error {:.4e}, E real/pred {:.4e}/{:.4e}, sharpness real/pred {:.4e}/{:.4e}",
            last.step, last.ke_error, last.e_real, last.e_pred, last.sharp_real, last.sharp_pred
        );
    }
    ctx.finish()
}
