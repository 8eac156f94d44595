use flowcast::dynsys::{read_dataset, write_dataset, ChannelRole, Dataset, Field, Normalization, Trajectory, TrajectoryMeta};
use flowcast::flowmatch::{path_loss, PathSample};
use flowcast::metrics::straightness;
use flowcast::nn::{FnField, ModelParams};
use flowcast::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-10.0f64..10.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn pair(batch: usize, dim: usize) -> impl Strategy<Value = (Tensor, Tensor, Vec<f64>)> {
    (tensor(vec![batch, dim]), tensor(vec![batch, dim]), prop::collection::vec(0.0f64..=1.0, batch))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_hits_both_endpoints_and_moves_along_the_chord((x0, x1, t) in pair(3, 4)) {
        let start = PathSample::at(x0.clone(), x1.clone(), vec![0.0; 3]).unwrap();
        prop_assert_eq!(&start.xt, &x0);
        let end = PathSample::at(x0.clone(), x1.clone(), vec![1.0; 3]).unwrap();
        prop_assert!(end.xt.max_abs_diff(&x1) <= 1e-12);
        let mid = PathSample::at(x0.clone(), x1.clone(), t.clone()).unwrap();
        prop_assert_eq!(&mid.dxt, &x1.sub(&x0).unwrap());
        for b in 0..3 {
            for j in 0..4 {
                let i = b * 4 + j;
                let want = t[b] * x1.data()[i] + (1.0 - t[b]) * x0.data()[i];
                prop_assert!((mid.xt.data()[i] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_on_the_true_velocity((x0, x1, t) in pair(4, 2), c in -3.0f64..3.0) {
        let path = PathSample::at(x0, x1, t).unwrap();
        let constant = FnField(move |_t: &[f64], x: &Tensor, _c: Option<&Tensor>| Ok(x.map(|_| c)));
        prop_assert!(path_loss(&constant, &path, None).unwrap() >= 0.0);
        let target = path.dxt.clone();
        let exact = FnField(move |_t: &[f64], _x: &Tensor, _c: Option<&Tensor>| Ok(target.clone()));
        prop_assert_eq!(path_loss(&exact, &path, None).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip(a in tensor(vec![2, 3]), b in tensor(vec![5]), s in -1e6f64..1e6) {
        let mut p = ModelParams::new();
        p.insert("layer.weight", a).unwrap();
        p.insert("layer.bias", b).unwrap();
        p.insert("scale", Tensor::scalar(s)).unwrap();
        let mut bytes = Vec::new();
        p.write_checkpoint(&mut bytes).unwrap();
        let back = ModelParams::read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn dataset_round_trip(values in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 2 * 3 * 4), dt in 0.01f64..1.0) {
        let roles = vec![ChannelRole::Density, ChannelRole::MomentumX];
        let trajectories = values
            .chunks(3 * 2 * 3 * 4)
            .enumerate()
            .map(|(ti, chunk)| Trajectory {
                states: chunk
                    .chunks(2 * 3 * 4)
                    .enumerate()
                    .map(|(k, d)| Field::new(Tensor::new(vec![2, 3, 4], d.to_vec()).unwrap(), roles.clone(), k as f64 * dt).unwrap())
                    .collect(),
                dt_sim: dt,
                meta: TrajectoryMeta { generator: "fmds".into(), seed: ti as u64 },
            })
            .collect();
        let ds = Dataset::new(trajectories, Normalization { mean: vec![0.5, -1.0], std: vec![2.0, 0.25] }).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        prop_assert_eq!(read_dataset(bytes.as_slice()).unwrap(), ds);
    }

    #[test]
    fn straightness_ignores_translation(points in prop::collection::vec(tensor(vec![1, 3]), 3..8), shift in tensor(vec![1, 3])) {
        let n = points.len() as f64 - 1.0;
        let path: Vec<(f64, Tensor)> = points.iter().enumerate().map(|(i, p)| (i as f64 / n, p.clone())).collect();
        let moved: Vec<(f64, Tensor)> = path.iter().map(|(t, p)| (*t, p.add(&shift).unwrap())).collect();
        let a = straightness(&path).unwrap();
        let b = straightness(&moved).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }
}
