use kinedecode::decoders::{
    premovnet_layers, premovnet_param_count, DecoderError, MlrModel, NetKind, PreMovNet,
};
use kinedecode::epoching::DesignMatrix;
use kinedecode::gradkit::{adam_step, AdamHyper, AdamState, LayerSpec, Mode, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_design(rows: usize, channels: usize, lags: usize, seed: u64) -> DesignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * channels * lags)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    DesignMatrix::from_vec(rows, channels, lags, data).unwrap()
}

fn planted(design: &DesignMatrix, seed: u64) -> (Vec<[f64; 3]>, [f64; 3], Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = design.width();
    let alpha = [
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    ];
    let beta: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..design.rows())
        .map(|t| {
            let row = design.row(t);
            let mut out = alpha;
            for a in 0..3 {
                out[a] += row
                    .iter()
                    .zip(&beta[a * d..])
                    .map(|(x, b)| x * b)
                    .sum::<f64>();
            }
            out
        })
        .collect();
    (y, alpha, beta)
}

fn mse(pred: &[[f64; 3]], y: &[[f64; 3]]) -> f64 {
    pred.iter()
        .zip(y)
        .flat_map(|(p, y)| (0..3).map(move |a| (p[a] - y[a]).powi(2)))
        .sum::<f64>()
        / (3 * y.len()) as f64
}

/// Neumaier-compensated sum.
fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() {
            (s - t) + v
        } else {
            (v - t) + s
        };
        s = t;
    }
    s + c
}

#[test]
fn single_channel_line_fit() {
    let v: Vec<f64> = (0..50)
        .map(|t| (t as f64 * 0.731).sin() * 3.0 + 0.2)
        .collect();
    let design = DesignMatrix::from_vec(50, 1, 1, v.clone()).unwrap();
    let y: Vec<[f64; 3]> = v.iter().map(|v| [2.0 * v + 1.0; 3]).collect();
    let m = MlrModel::fit(&design, &y, 0.0).unwrap();

    // simple-regression closed form with compensated sums
    let n = v.len() as f64;
    let mv = sum(v.iter().copied()) / n;
    let my = sum(y.iter().map(|r| r[0])) / n;
    let sxy = sum(v.iter().zip(&y).map(|(v, y)| (v - mv) * (y[0] - my)));
    let sxx = sum(v.iter().map(|v| (v - mv) * (v - mv)));
    let (b, a) = (sxy / sxx, my - sxy / sxx * mv);
    for axis in 0..3 {
        assert!((m.alpha[axis] - 1.0).abs() < 1e-9);
        assert!((m.coefficient(axis, 0, 0) - 2.0).abs() < 1e-9);
        assert!((m.alpha[axis] - a).abs() < 1e-9 && (m.coefficient(axis, 0, 0) - b).abs() < 1e-9);
    }
}

#[test]
fn planted_model_recovered_and_matches_qr_oracle() {
    let design = random_design(400, 3, 5, 1);
    let (y, alpha, beta) = planted(&design, 2);
    let m = MlrModel::fit(&design, &y, 0.0).unwrap();
    for a in 0..3 {
        assert!((m.alpha[a] - alpha[a]).abs() <= 1e-9 * alpha[a].abs().max(1.0));
    }
    for (got, want) in m.beta.iter().zip(&beta) {
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
    let pred = m.predict(&design).unwrap();
    assert!(mse(&pred, &y).sqrt() < 1e-8);

    // augmented least squares via SVD
    let d = design.width();
    let x = DMatrix::from_fn(design.rows(), d + 1, |t, j| {
        if j == 0 {
            1.0
        } else {
            design.row(t)[j - 1]
        }
    });
    let svd = x.svd(true, true);
    for a in 0..3 {
        let ya = DVector::from_iterator(y.len(), y.iter().map(|r| r[a]));
        let sol = svd.solve(&ya, 1e-12).unwrap();
        assert!((sol[0] - m.alpha[a]).abs() < 1e-9);
        for j in 0..d {
            assert!((sol[j + 1] - m.beta[a * d + j]).abs() < 1e-9);
        }
    }
}

#[test]
fn ridge_solution_matches_augmented_oracle() {
    let design = random_design(60, 2, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<[f64; 3]> = (0..60)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let lambda = 0.7;
    let m = MlrModel::fit(&design, &y, lambda).unwrap();
    let d = design.width();
    let x = DMatrix::from_fn(
        60,
        d + 1,
        |t, j| if j == 0 { 1.0 } else { design.row(t)[j - 1] },
    );
    let mut penalty = DMatrix::<f64>::identity(d + 1, d + 1) * lambda;
    penalty[(0, 0)] = 0.0;
    let normal = x.transpose() * &x + penalty;
    let inv = normal.try_inverse().unwrap();
    for a in 0..3 {
        let ya = DVector::from_iterator(60, y.iter().map(|r| r[a]));
        let sol = &inv * (x.transpose() * ya);
        assert!((sol[0] - m.alpha[a]).abs() < 1e-9);
        for j in 0..d {
            assert!((sol[j + 1] - m.beta[a * d + j]).abs() < 1e-9);
        }
    }
}

#[test]
fn prediction_is_affine_in_the_design() {
    let d1 = random_design(40, 2, 3, 5);
    let d2 = random_design(40, 2, 3, 6);
    let (y, _, _) = planted(&d1, 7);
    let m = MlrModel::fit(&d1, &y, 0.0).unwrap();
    let sum_design = DesignMatrix::from_vec(
        40,
        2,
        3,
        d1.as_slice()
            .iter()
            .zip(d2.as_slice())
            .map(|(a, b)| a + b)
            .collect(),
    )
    .unwrap();
    let (p1, p2, p12) = (
        m.predict(&d1).unwrap(),
        m.predict(&d2).unwrap(),
        m.predict(&sum_design).unwrap(),
    );
    for t in 0..40 {
        for a in 0..3 {
            assert!((p12[t][a] - (p1[t][a] + p2[t][a] - m.alpha[a])).abs() < 1e-12);
        }
    }
}

#[test]
fn least_squares_beats_random_perturbations() {
    let design = random_design(80, 2, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<[f64; 3]> = (0..80)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let m = MlrModel::fit(&design, &y, 0.0).unwrap();
    let best = mse(&m.predict(&design).unwrap(), &y);
    for _ in 0..100 {
        let mut p = m.clone();
        let scale = 10f64.powf(rng.random_range(-6.0..0.0));
        p.alpha
            .iter_mut()
            .chain(p.beta.iter_mut())
            .for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        assert!(mse(&p.predict(&design).unwrap(), &y) >= best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mlr_is_affine_equivariant_in_targets(seed in 0u64..10_000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let design = random_design(30, 2, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let y: Vec<[f64; 3]> = (0..30).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let ys: Vec<[f64; 3]> = y.iter().map(|r| r.map(|v| a * v + b)).collect();
        let p = MlrModel::fit(&design, &y, 0.0).unwrap().predict(&design).unwrap();
        let ps = MlrModel::fit(&design, &ys, 0.0).unwrap().predict(&design).unwrap();
        for (p, ps) in p.iter().zip(&ps) {
            for k in 0..3 {
                prop_assert!((ps[k] - (a * p[k] + b)).abs() < 1e-9 * (1.0 + ps[k].abs()));
            }
        }
    }
}

#[test]
fn singular_design_reports_ridge_hint() {
    let v: Vec<f64> = (0..20).map(|t| t as f64).collect();
    let data = v.iter().flat_map(|&x| [x, 2.0 * x]).collect();
    let design = DesignMatrix::from_vec(20, 2, 1, data).unwrap();
    let y = vec![[1.0, 2.0, 3.0]; 20];
    let err = MlrModel::fit(&design, &y, 0.0).unwrap_err();
    assert_eq!(err, DecoderError::SingularSystem);
    assert!(err.to_string().contains("lambda > 0"));
}

#[test]
fn parameter_counts_match_closed_form() {
    for lag in [15, 20, 25, 30, 35] {
        for kind in [NetKind::PreMovNetI, NetKind::PreMovNetII] {
            let m = PreMovNet::build(kind, lag, 21, 0).unwrap();
            assert_eq!(
                m.parameter_count(),
                premovnet_param_count(kind, lag, 21),
                "{kind} L={lag}"
            );
        }
    }
    let (_, layers) = premovnet_layers(NetKind::PreMovNetI, 15, 21).unwrap();
    assert_eq!(
        layers[1],
        LayerSpec::Dense {
            input: 315,
            output: 128,
            activation: kinedecode::gradkit::Activation::Relu
        }
    );
    let m = PreMovNet::build(NetKind::PreMovNetI, 15, 21, 0).unwrap();
    let first_dense: usize = m
        .net
        .layer_params(1)
        .iter()
        .map(|&id| m.net.params().value(id).len())
        .sum();
    assert_eq!(first_dense, 315 * 128 + 128);
}

#[test]
fn same_seed_same_initialization() {
    for kind in [NetKind::PreMovNetI, NetKind::PreMovNetII] {
        let a = PreMovNet::build(kind, 25, 4, 42).unwrap();
        let b = PreMovNet::build(kind, 25, 4, 42).unwrap();
        let c = PreMovNet::build(kind, 25, 4, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn predictions_are_deterministic_and_shaped() {
    let m = PreMovNet::build(NetKind::PreMovNetI, 15, 21, 1).unwrap();
    let design = random_design(4000, 21, 15, 10);
    let p = m.predict(&design).unwrap();
    assert_eq!(p.len(), 4000);
    assert!(p.iter().flatten().all(|v| v.is_finite()));

    let seq = PreMovNet::build(NetKind::PreMovNetII, 15, 3, 2).unwrap();
    let row = random_design(1, 3, 15, 11).row(0).to_vec();
    let twice = DesignMatrix::from_vec(2, 3, 15, [row.clone(), row].concat()).unwrap();
    let p = seq.predict(&twice).unwrap();
    assert_eq!(p[0], p[1]);
}

#[test]
fn zero_hidden_weights_give_output_bias() {
    let mut m = PreMovNet::build(NetKind::PreMovNetI, 3, 2, 5).unwrap();
    for layer in 1..=4 {
        for id in m.net.layer_params(layer).to_vec() {
            m.net.params_mut().value_mut(id).data_mut().fill(0.0);
        }
    }
    let bias_id = m.net.layer_params(5)[1];
    m.net
        .params_mut()
        .value_mut(bias_id)
        .data_mut()
        .copy_from_slice(&[0.5, -1.0, 2.0]);
    let p = m.predict(&random_design(7, 2, 3, 12)).unwrap();
    assert!(p.iter().all(|r| *r == [0.5, -1.0, 2.0]));
}

#[test]
fn nonfinite_weights_are_corrupt() {
    let mut m = PreMovNet::build(NetKind::PreMovNetI, 3, 2, 5).unwrap();
    let id = m.net.layer_params(2)[0];
    m.net.params_mut().value_mut(id).data_mut()[0] = f64::NAN;
    assert!(matches!(
        m.predict(&random_design(2, 2, 3, 1)),
        Err(DecoderError::CorruptModel(_))
    ));
}

#[test]
fn one_adam_step_lowers_single_pair_loss() {
    for kind in [NetKind::PreMovNetI, NetKind::PreMovNetII] {
        let mut m = PreMovNet::build(kind, 15, 4, 3).unwrap();
        let design = random_design(1, 4, 15, 13);
        let x = m.input_batch(&[design.row(0)]);
        let y = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let rng = || ChaCha8Rng::seed_from_u64(99);
        let (before, _) = m.net.loss(&x, &y, Mode::Train, &mut rng(), true).unwrap();
        let mut state = AdamState::new(
            m.net.params(),
            AdamHyper {
                lr: 1e-4,
                ..Default::default()
            },
        );
        adam_step(m.net.params_mut(), &mut state).unwrap();
        let (after, _) = m.net.loss(&x, &y, Mode::Train, &mut rng(), false).unwrap();
        assert!(after < before, "{kind}: {before} -> {after}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = PreMovNet::build(NetKind::PreMovNetII, 15, 3, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = m.save(dir.path(), "cnnlstm", "cfg").unwrap();
    let back = PreMovNet::load(&path).unwrap();
    assert_eq!(
        (back.kind, back.lag, back.channels),
        (m.kind, m.lag, m.channels)
    );
    let design = random_design(5, 3, 15, 4);
    let (a, b) = (m.predict(&design).unwrap(), back.predict(&design).unwrap());
    for (a, b) in a.iter().zip(&b) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-4 * (1.0 + a[k].abs()));
        }
    }
}
