#[path = "common/metric_oracles.rs"]
mod oracle;

use flowcast::dynsys::{Field, Trajectory, TrajectoryMeta, PHYSICAL_ROLES};
use flowcast::metrics::{
    average_tables, energy_spectrum, evaluate_rollout, ke_error, kinetic_energy, sharpness, straightness, Boundary,
};
use flowcast::{rng_from_seed, Tensor};
use oracle::random_field;

#[test]
fn field_statistics_match_double_loops() {
    let mut rng = rng_from_seed(0);
    for (h, w) in [(4, 4), (8, 16), (5, 3)] {
        for _ in 0..5 {
            let a = random_field(h, w, &mut rng);
            let b = random_field(h, w, &mut rng);
            assert!((kinetic_energy(&a).unwrap() - oracle::kinetic_energy(&a)).abs() <= 1e-12);
            assert!((ke_error(&a, &b).unwrap() - oracle::ke_error(&a, &b)).abs() <= 1e-12);
            assert!((sharpness(&a, Boundary::Periodic).unwrap() - oracle::sharpness_periodic(&a)).abs() <= 1e-12);
        }
    }
}

#[test]
fn spectrum_matches_direct_dft_and_parseval() {
    let mut rng = rng_from_seed(1);
    for (h, w) in [(8, 8), (8, 16), (16, 4)] {
        let f = random_field(h, w, &mut rng);
        let s = energy_spectrum(&f).unwrap();
        let reference = oracle::spectrum(&f);
        for (a, b) in s.energy_density.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let e = kinetic_energy(&f).unwrap();
        assert!((s.total() - e).abs() <= 1e-8 * e);
    }
}

#[test]
fn pure_cosine_lands_in_its_bin() {
    let (h, w, amp) = (16, 32, 0.7);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            data[i * w + j] = 1.0;
            data[h * w + i * w + j] = amp * (2.0 * std::f64::consts::PI * 3.0 * j as f64 / w as f64).cos();
        }
    }
    let f = Field::new(Tensor::new(vec![3, h, w], data).unwrap(), PHYSICAL_ROLES.to_vec(), 0.0).unwrap();
    let s = energy_spectrum(&f).unwrap();
    for (k, d) in s.energy_density.iter().enumerate() {
        let want = if k == 3 { amp * amp / 4.0 } else { 0.0 };
        assert!((d - want).abs() <= 1e-14, "bin {k}: {d}");
    }
}

/// Per-segment reference written out directly for a 5-point quarter circle.
#[test]
fn quarter_circle_straightness() {
    let pts: Vec<(f64, Tensor)> = (0..5)
        .map(|k| {
            let t = k as f64 / 4.0;
            let a = t * std::f64::consts::FRAC_PI_2;
            (t, Tensor::new(vec![2], vec![a.cos(), a.sin()]).unwrap())
        })
        .collect();
    let chord = [-1.0, 1.0];
    let mut expected = 0.0;
    for k in 0..4 {
        let (a0, a1) = (k as f64 * std::f64::consts::FRAC_PI_8, (k + 1) as f64 * std::f64::consts::FRAC_PI_8);
        let vx = (a1.cos() - a0.cos()) * 4.0;
        let vy = (a1.sin() - a0.sin()) * 4.0;
        expected += (vx - chord[0]).powi(2) + (vy - chord[1]).powi(2);
    }
    expected /= 4.0;
    let got = straightness(&pts).unwrap();
    assert!(got > 0.0);
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    assert!(straightness(&pts[..2]).is_err());
}

#[test]
fn ke_error_is_a_pseudometric_in_velocity() {
    let mut rng = rng_from_seed(2);
    let real = random_field(8, 8, &mut rng);
    let with_velocity = |f: &Field| {
        // Same density as `real`, momenta rescaled to carry f's velocity.
        let (_, ux, uy) = flowcast::metrics::velocities(f).unwrap();
        let rho = real.channels.data()[..64].to_vec();
        let mut d = rho.clone();
        d.extend(rho.iter().zip(&ux).map(|(r, u)| r * u));
        d.extend(rho.iter().zip(&uy).map(|(r, u)| r * u));
        Field::new(Tensor::new(vec![3, 8, 8], d).unwrap(), PHYSICAL_ROLES.to_vec(), 0.0).unwrap()
    };
    for _ in 0..20 {
        let a = with_velocity(&random_field(8, 8, &mut rng));
        let b = with_velocity(&random_field(8, 8, &mut rng));
        let c = with_velocity(&random_field(8, 8, &mut rng));
        // All three share the reference density, so the weight is fixed.
        let d = |x: &Field, y: &Field| ke_error(x, y).unwrap().sqrt();
        assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        assert_eq!(d(&a, &a), 0.0);
        assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }
}

fn traj(states: Vec<Field>) -> Trajectory {
    Trajectory { states, dt_sim: 0.1, meta: TrajectoryMeta { generator: "test".into(), seed: 0 } }
}

#[test]
fn rollout_table_rows_equal_individual_metrics() {
    let mut rng = rng_from_seed(3);
    let real = traj((0..4).map(|_| random_field(8, 8, &mut rng)).collect());
    let pred = traj((0..4).map(|_| random_field(8, 8, &mut rng)).collect());
    let rows = evaluate_rollout(&real, &pred, Boundary::ClampedRows).unwrap();
    assert_eq!(rows.len(), 4);
    let r = rows[2];
    assert_eq!(r.ke_error, ke_error(&real.states[2], &pred.states[2]).unwrap());
    assert_eq!(r.e_pred, kinetic_energy(&pred.states[2]).unwrap());
    assert_eq!(r.sharp_real, sharpness(&real.states[2], Boundary::ClampedRows).unwrap());
    let same = evaluate_rollout(&real, &real, Boundary::Periodic).unwrap();
    assert!(same.iter().all(|r| r.ke_error == 0.0 && r.e_real == r.e_pred));
    assert_eq!(average_tables(&[rows.clone()]).unwrap(), rows);
    let one = evaluate_rollout(&traj(vec![real.states[0].clone()]), &traj(vec![pred.states[0].clone()]), Boundary::Periodic);
    assert_eq!(one.unwrap().len(), 1);
    assert!(evaluate_rollout(&real, &traj(pred.states[..3].to_vec()), Boundary::Periodic).is_err());
}
