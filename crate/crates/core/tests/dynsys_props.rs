use flowcast::dynsys::{
    augment, observe_band, rollout, sliced_simulation, ChannelRole, Field, GeneratorKind, GeneratorSpec,
    Normalization, Sampler, PHYSICAL_ROLES,
};
use flowcast::nn::FnField;
use flowcast::odesolve::SolverConfig;
use flowcast::{rng_from_seed, Tensor};

#[test]
fn sliced_twins_with_different_hidden_state_diverge() {
    let spec = GeneratorSpec::new(GeneratorKind::SlicedBuoyancy);
    let (h, w) = (spec.height, spec.width * spec.hidden_factor);
    let dy = 2.0 * std::f64::consts::PI / h as f64;
    let dx = 2.0 * std::f64::consts::PI / w as f64 * spec.hidden_factor as f64;
    let omega: Vec<f64> = (0..h * w).map(|i| 0.05 * ((i / w) as f64 * dy).sin() * ((i % w) as f64 * dx).cos()).collect();
    let base: Vec<f64> = (0..h * w).map(|i| -((i / w) as f64 * dy).cos()).collect();
    // A smooth bump centred in the hidden columns; its tails and spectral
    // truncation leak far below rounding into the observed band.
    let centre = (spec.width + w) as f64 / 2.0;
    let hidden: Vec<f64> = (0..h * w)
        .map(|i| {
            let d = (i % w) as f64 - centre;
            base[i] + 0.3 * ((i / w) as f64 * 2.0 * dy).sin() * (-d * d / 72.0).exp()
        })
        .collect();
    let mut a = sliced_simulation(&spec, &omega, &base).unwrap();
    let mut b = sliced_simulation(&spec, &omega, &hidden).unwrap();
    let observe = |s: &flowcast::dynsys::SpectralSim| observe_band(s, &spec, 0, spec.width, 0.0).unwrap().channels;
    assert!(observe(&a).max_abs_diff(&observe(&b)) <= 1e-12, "twins must start from the same observation");
    let (mut ra, mut rb) = (rng_from_seed(9), rng_from_seed(9));
    let mut dist = Vec::new();
    for _ in 0..6 {
        for _ in 0..spec.inner_substeps {
            a.step(&mut ra).unwrap();
            b.step(&mut rb).unwrap();
        }
        dist.push(observe(&a).sub(&observe(&b)).unwrap().sq_norm().sqrt());
    }
    assert!(dist[0] > 0.0);
    assert!(dist.windows(2).all(|p| p[1] > p[0]), "{dist:?}");
}

fn start_field() -> Field {
    let mut rng = rng_from_seed(1);
    let t = Tensor::uniform(&[3, 4, 4], 0.5, 1.5, &mut rng);
    augment(&Field::new(t, PHYSICAL_ROLES.to_vec(), 0.0).unwrap(), 0.0, 1.0).unwrap()
}

/// `y' = 0.8 y + x0`: the noise enters linearly through the Euler step.
fn ar_field() -> FnField<impl Fn(&[f64], &Tensor, Option<&Tensor>) -> flowcast::Result<Tensor> + Sync> {
    FnField(|_t: &[f64], x: &Tensor, c: Option<&Tensor>| {
        let c = c.expect("conditioned");
        let (b, n) = (x.shape()[0], x.numel() / x.shape()[0]);
        let cn = c.numel() / b;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..b {
            for j in 0..n {
                out.data_mut()[i * n + j] = 0.8 * c.data()[i * cn + j];
            }
        }
        Ok(out)
    })
}

#[test]
fn replaying_from_an_intermediate_state_matches_statistics() {
    let field = ar_field();
    let sampler = Sampler::Flow { field: &field, solver: SolverConfig::euler(1) };
    let norm = Normalization::identity(3);
    let y0 = start_field();
    let summary = |f: &Field| f.physical().channels.mean();
    let (mut direct, mut replayed) = (Vec::new(), Vec::new());
    for seed in 0..200 {
        let tr = rollout(&sampler, &y0, &norm, 0.1, 1.0, 3, &mut rng_from_seed(seed)).unwrap();
        direct.push(summary(&tr.states[3]));
        let again = rollout(&sampler, &tr.states[2], &norm, 0.1, 1.0, 1, &mut rng_from_seed(10_000 + seed)).unwrap();
        replayed.push(summary(&again.states[1]));
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
    };
    let (dm, ds) = stats(&direct);
    let (rm, rs) = stats(&replayed);
    assert!((dm - rm).abs() <= 0.05 * dm.abs().max(ds), "means {dm} {rm}");
    assert!((ds - rs).abs() <= 0.05 * ds, "stds {ds} {rs}");
}

#[test]
fn noise_is_fresh_per_step_and_fixed_by_the_seed() {
    let zero = FnField(|_t: &[f64], x: &Tensor, _c: Option<&Tensor>| Ok(Tensor::zeros(x.shape())));
    let sampler = Sampler::Flow { field: &zero, solver: SolverConfig::euler(2) };
    let norm = Normalization::identity(3);
    let y0 = start_field();
    let a = rollout(&sampler, &y0, &norm, 0.1, 1.0, 4, &mut rng_from_seed(3)).unwrap();
    let b = rollout(&sampler, &y0, &norm, 0.1, 1.0, 4, &mut rng_from_seed(3)).unwrap();
    assert_eq!(a, b);
    for i in 1..a.len() {
        for j in i + 1..a.len() {
            assert_ne!(a.states[i].physical().channels, a.states[j].physical().channels);
        }
    }
}

#[test]
fn conditioning_time_follows_the_step_index() {
    let field = ar_field();
    let sampler = Sampler::OneStep(&field);
    let norm = Normalization::identity(3);
    let (tau0, dt, tau_max) = (0.3, 0.1, 2.0);
    let mut rng = rng_from_seed(4);
    let start = Field::new(Tensor::uniform(&[3, 4, 4], 0.5, 1.5, &mut rng), PHYSICAL_ROLES.to_vec(), tau0).unwrap();
    let y0 = augment(&start, tau0, tau_max).unwrap();
    let tr = rollout(&sampler, &y0, &norm, dt, tau_max, 7, &mut rng).unwrap();
    assert_eq!(tr.len(), 8);
    for (k, s) in tr.states.iter().enumerate() {
        let want = (tau0 + k as f64 * dt) / tau_max;
        assert!(s.channel(ChannelRole::CondTime).unwrap().iter().all(|v| (v - want).abs() <= 1e-12));
        let pos = s.channel(ChannelRole::CondPos).unwrap();
        assert_eq!(&pos[..4], &[0.0; 4]);
        assert_eq!(&pos[12..], &[1.0; 4]);
    }
    let none = rollout(&sampler, &y0, &norm, dt, tau_max, 0, &mut rng).unwrap();
    assert_eq!(none.states, vec![y0]);
}
