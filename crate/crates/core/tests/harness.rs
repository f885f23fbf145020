use std::fs;

use kinedecode::dataio::write_bundle;
use kinedecode::decoders::{Decoder, MlrModel, NetKind, PreMovNet};
use kinedecode::epoching::{epoch_trials, DesignMatrix};
use kinedecode::harness::*;
use proptest::prelude::*;

fn small_linear(seed: u64) -> SynthSpec {
    SynthSpec {
        participant_id: format!("L{seed}"),
        channels: 3,
        lag: 15,
        trials: 40,
        noise_sigma: 0.0,
        coupling: Coupling::Linear {
            alpha: None,
            beta: None,
        },
        seed,
        sample_rate_hz: 100.0,
        trial_samples: 30,
        gap_samples: 10,
        band_hz: [0.5, 30.0],
    }
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        patience: 3,
        batch_size: 32,
        ..Default::default()
    }
}

#[test]
fn pcc_reference_values() {
    let x = [1.0, 2.0, 3.0];
    assert!((pcc(&x, &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((pcc(&x, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // centered: dx = (-1, 0, 1), dy = (-1, 1, 0) -> 1 / (sqrt 2 * sqrt 2)
    assert!((pcc(&x, &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pcc_is_affine_invariant_and_symmetric(
        x in prop::collection::vec(-100.0f64..100.0, 3..60),
        noise in prop::collection::vec(-1.0f64..1.0, 60),
        a in 0.01f64..100.0,
        b in -1e3f64..1e3,
    ) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(x, n)| 0.3 * x + 10.0 * n).collect();
        prop_assume!(pcc(&x, &y).is_ok());
        let r = pcc(&x, &y).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        prop_assert!((pcc(&x, &ys).unwrap() - r).abs() < 1e-9);
        prop_assert!((pcc(&y, &x).unwrap() - r).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((pcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}

fn trajectory(id: u32, measured: Vec<[f64; 3]>, predicted: Vec<[f64; 3]>) -> TrialTrajectory {
    TrialTrajectory {
        trial_id: id,
        sample_rate_hz: 100.0,
        measured,
        predicted,
    }
}

fn wiggle(n: usize, phase: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|k| {
            let t = k as f64 * 0.1 + phase;
            [t.sin(), (1.3 * t).cos(), t * 0.2 + (0.7 * t).sin()]
        })
        .collect()
}

#[test]
fn evaluation_identity_sign_and_scale() {
    let measured = [wiggle(20, 0.0), wiggle(25, 1.0)];
    let same = Evaluation::from_trials(
        measured
            .iter()
            .enumerate()
            .map(|(i, m)| trajectory(i as u32, m.clone(), m.clone()))
            .collect(),
    )
    .unwrap();
    assert!(same.r.iter().all(|r| (r - 1.0).abs() < 1e-12));
    let neg = Evaluation::from_trials(
        measured
            .iter()
            .enumerate()
            .map(|(i, m)| {
                trajectory(
                    i as u32,
                    m.clone(),
                    m.iter().map(|v| v.map(|x| -x)).collect(),
                )
            })
            .collect(),
    )
    .unwrap();
    assert!(neg.r.iter().all(|r| (r + 1.0).abs() < 1e-12));
    let noisy: Vec<_> = measured
        .iter()
        .enumerate()
        .map(|(i, m)| {
            trajectory(
                i as u32,
                m.clone(),
                m.iter()
                    .enumerate()
                    .map(|(k, v)| v.map(|x| x + 0.3 * ((k * 7) % 5) as f64))
                    .collect(),
            )
        })
        .collect();
    let scaled: Vec<_> = noisy
        .iter()
        .map(|t| {
            trajectory(
                t.trial_id,
                t.measured.clone(),
                t.predicted
                    .iter()
                    .map(|v| v.map(|x| 4.0 * x - 2.0))
                    .collect(),
            )
        })
        .collect();
    let (a, b) = (
        Evaluation::from_trials(noisy).unwrap(),
        Evaluation::from_trials(scaled).unwrap(),
    );
    for k in 0..3 {
        assert!((a.r[k] - b.r[k]).abs() < 1e-12);
    }
}

#[test]
fn trajectory_export_is_one_file_per_trial_and_deterministic() {
    let trials: Vec<_> = (0..30)
        .map(|i| trajectory(i + 1, wiggle(12, i as f64), wiggle(12, i as f64 + 0.1)))
        .collect();
    let eval = Evaluation::from_trials(trials).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p1 = export_trajectories(&eval, d1.path()).unwrap();
    let p2 = export_trajectories(&eval, d2.path()).unwrap();
    assert_eq!(p1.len(), 30);
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
    let text = fs::read_to_string(&p1[0]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRAJECTORY_HEADER));
    for (line, m) in lines.zip(&eval.trials[0].measured) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(&cols[1..4], m.as_slice());
    }
}

#[test]
fn noiseless_linear_synth_is_recovered() {
    let mut spec = SynthSpec::linear_preset();
    spec.trials = 50;
    let out = synth_generate(&spec).unwrap();
    let GroundTruth::Linear { alpha, beta } = &out.truth else {
        panic!("linear truth")
    };
    let pairs = epoch_trials(&out.bundle, spec.lag).unwrap().pairs;
    let design = DesignMatrix::stack(pairs.iter().map(|p| &p.design)).unwrap();
    let y: Vec<[f64; 3]> = pairs
        .iter()
        .flat_map(|p| p.target.iter().copied())
        .collect();
    let m = MlrModel::fit(&design, &y, 0.0).unwrap();
    let scale = beta.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for (got, want) in m.beta.iter().zip(beta) {
        assert!((got - want).abs() <= 1e-6 * scale);
    }
    for a in 0..3 {
        assert!((m.alpha[a] - alpha[a]).abs() <= 1e-6 * alpha[a].abs().max(1.0));
    }
    let eval = evaluate(&Decoder::Mlr(m), &pairs, 100.0).unwrap();
    assert!(eval.r.iter().all(|&r| r >= 0.9999));
}

#[test]
fn overwhelming_noise_destroys_correlation() {
    let mut spec = small_linear(3);
    spec.trials = 250;
    spec.trial_samples = 40;
    let clean = synth_generate(&spec).unwrap();
    let signal_var: f64 = {
        let ys = &clean.clean;
        let m = ys.iter().map(|y| y[0]).sum::<f64>() / ys.len() as f64;
        ys.iter().map(|y| (y[0] - m).powi(2)).sum::<f64>() / ys.len() as f64
    };
    // SNR = -30 dB
    spec.noise_sigma = (signal_var * 1e3).sqrt();
    let noisy = synth_generate(&spec).unwrap();
    let pairs = epoch_trials(&noisy.bundle, spec.lag).unwrap().pairs;
    assert!(pairs.iter().map(|p| p.rows()).sum::<usize>() >= 10_000);
    let measured: Vec<[f64; 3]> = pairs
        .iter()
        .flat_map(|p| p.target.iter().copied())
        .collect();
    let rows: Vec<usize> = pairs
        .iter()
        .flat_map(|p| (0..p.rows()).map(move |k| p.onset_index + k))
        .collect();
    let truth: Vec<[f64; 3]> = rows.iter().map(|&t| noisy.clean[t]).collect();
    for r in pcc_axes(&measured, &truth).unwrap() {
        assert!(r.abs() < 0.1, "r = {r}");
    }
}

#[test]
fn synth_bundles_are_byte_identical() {
    let spec = small_linear(9);
    let (a, b) = (
        synth_generate(&spec).unwrap(),
        synth_generate(&spec).unwrap(),
    );
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_bundle(&a.bundle, d1.path()).unwrap();
    write_bundle(&b.bundle, d2.path()).unwrap();
    for name in ["manifest.json", "eeg.f32", "kinematics.csv", "events.csv"] {
        assert_eq!(
            fs::read(d1.path().join(name)).unwrap(),
            fs::read(d2.path().join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(a.truth, b.truth);
}

#[test]
fn one_epoch_cap_and_repeatable_history() {
    let out = synth_generate(&small_linear(4)).unwrap();
    let data = prepare(
        &out.bundle,
        15,
        SplitSpec::Counts {
            train: 30,
            val: 5,
            test: 5,
        },
        1,
        false,
    )
    .unwrap();
    let run = |cfg: &TrainConfig| {
        let mut net = PreMovNet::build(NetKind::PreMovNetI, 15, 3, 5).unwrap();
        let h = train(&mut net, &data.split.train, &data.split.val, cfg).unwrap();
        (net, h)
    };
    let (_, h) = run(&TrainConfig {
        max_epochs: 1,
        patience: 50,
        ..quick_train(1)
    });
    assert_eq!(h.epochs.len(), 1);
    let cfg = quick_train(6);
    let (net_a, ha) = run(&cfg);
    let (net_b, hb) = run(&cfg);
    assert_eq!(ha, hb);
    assert_eq!(net_a, net_b);
    // restored weights are the best epoch's
    let best = ha
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(ha.best_val_loss, best);
    assert!((mse_loss(&net_a, &data.split.val).unwrap() - best).abs() <= 1e-12 * best.max(1.0));
}

#[test]
fn linear_problem_favors_the_linear_decoder() {
    let spec = SynthSpec {
        trials: 60,
        ..small_linear(5)
    };
    let out = synth_generate(&spec).unwrap();
    let cfg = ExperimentConfig {
        models: ModelKind::ALL.to_vec(),
        lags_ms: vec![150],
        train: TrainConfig {
            max_epochs: 40,
            patience: 5,
            ..Default::default()
        },
        ..Default::default()
    };
    let rep = run_experiment(
        std::slice::from_ref(&out.bundle),
        &cfg,
        0,
        1,
        &ArtifactOptions::default(),
    )
    .unwrap();
    let r = |m: ModelKind| rep.cells.iter().find(|c| c.model == m).unwrap().r.unwrap();
    let lin = r(ModelKind::Mlr);
    for m in [ModelKind::Mlp, ModelKind::Cnnlstm] {
        let net = r(m);
        for a in 0..3 {
            assert!(
                lin[a] >= net[a] - 0.005,
                "{m} axis {a}: mlr {} vs {}",
                lin[a],
                net[a]
            );
        }
    }
}

#[test]
fn report_cardinality() {
    let cfg = ExperimentConfig::default();
    let mut cells = Vec::new();
    for p in 1..=12 {
        for &model in &cfg.models {
            for &lag_ms in &cfg.lags_ms {
                cells.push(CellResult {
                    participant: format!("P{p}"),
                    model,
                    lag_ms,
                    lag_samples: lag_ms as usize / 10,
                    seed: 0,
                    r: Some([0.1 * p as f64 / 12.0; 3]),
                    error: None,
                    note: None,
                    epochs_run: None,
                    best_epoch: None,
                    trials: None,
                });
            }
        }
    }
    let rep = PccReport::from_cells(0, cfg, cells);
    assert_eq!(rep.entries.len(), 540);
    assert_eq!(rep.aggregates.len(), 45);
    assert_eq!(rep.to_csv().lines().count(), 541);
    for agg in &rep.aggregates {
        let rs: Vec<f64> = rep
            .entries
            .iter()
            .filter(|e| e.model == agg.model && e.lag_ms == agg.lag_ms && e.axis == agg.axis)
            .map(|e| e.r)
            .collect();
        assert!((rs.iter().sum::<f64>() / rs.len() as f64 - agg.mean).abs() < 1e-15);
    }
}

#[test]
fn experiment_is_reproducible_across_worker_counts() {
    let bundles: Vec<_> = (0..2)
        .map(|s| synth_generate(&small_linear(20 + s)).unwrap().bundle)
        .collect();
    let cfg = ExperimentConfig {
        models: vec![ModelKind::Mlr, ModelKind::Mlp],
        lags_ms: vec![150, 200],
        train: quick_train(2),
        ..Default::default()
    };
    let a = run_experiment(&bundles, &cfg, 11, 1, &ArtifactOptions::default()).unwrap();
    let b = run_experiment(&bundles, &cfg, 11, 2, &ArtifactOptions::default()).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.entries.len(), 2 * 2 * 2 * 3);
}

#[test]
fn failing_cells_are_recorded_not_fatal() {
    let bundle = synth_generate(&small_linear(30)).unwrap().bundle;
    let cfg = ExperimentConfig {
        models: vec![ModelKind::Mlr, ModelKind::Cnnlstm],
        lags_ms: vec![100],
        train: quick_train(1),
        ..Default::default()
    };
    let rep = run_experiment(&[bundle], &cfg, 0, 1, &ArtifactOptions::default()).unwrap();
    let cnn = rep
        .cells
        .iter()
        .find(|c| c.model == ModelKind::Cnnlstm)
        .unwrap();
    assert!(cnn.r.is_none() && cnn.error.as_deref().unwrap().contains("too short"));
    assert!(rep
        .cells
        .iter()
        .find(|c| c.model == ModelKind::Mlr)
        .unwrap()
        .r
        .is_some());
    assert_eq!(rep.entries.len(), 3);
}
