//! Synthetic participants with a known EEG-to-kinematics coupling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dataio::{ParticipantBundle, Provenance, TrialEvent};
use crate::epoching::MOTOR_CHANNELS;
use crate::sigproc::{
    design_fir, filtfilt, num_taps_for_transition, DesignSpec, EegRecording, KinematicsTrack,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    /// `y_a = alpha_a + sum beta[a, n, l] * v_n[t - l]`; missing parts are
    /// drawn from the spec seed.
    Linear {
        #[serde(default)]
        alpha: Option<[f64; 3]>,
        #[serde(default)]
        beta: Option<Vec<f64>>,
    },
    /// A random ReLU network over the lag window with the given hidden
    /// widths, drawn from `seed`.
    Nonlinear { hidden: Vec<usize>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub participant_id: String,
    pub channels: usize,
    pub lag: usize,
    pub trials: usize,
    /// Standard deviation of the Gaussian noise added to each axis.
    pub noise_sigma: f64,
    pub coupling: Coupling,
    pub seed: u64,
    pub sample_rate_hz: f64,
    /// Rows per trial, movement onset to rest inclusive.
    pub trial_samples: usize,
    /// Samples between the rest of one trial and the onset of the next.
    pub gap_samples: usize,
    /// Pass band of the colored noise driving each channel.
    pub band_hz: [f64; 2],
}

impl SynthSpec {
    /// Noiseless linear coupling on a small montage.
    pub fn linear_preset() -> Self {
        Self {
            participant_id: "synth-linear".into(),
            channels: 3,
            lag: 5,
            trials: 40,
            noise_sigma: 0.0,
            coupling: Coupling::Linear {
                alpha: None,
                beta: None,
            },
            seed: 1,
            sample_rate_hz: 100.0,
            trial_samples: 50,
            gap_samples: 20,
            band_hz: [0.5, 30.0],
        }
    }

    /// 21 channels, 250 ms window, 200 trials, ReLU-network coupling.
    pub fn nonlinear_preset() -> Self {
        Self {
            participant_id: "synth-nonlinear".into(),
            channels: 21,
            lag: 25,
            trials: 200,
            noise_sigma: 0.05,
            coupling: Coupling::Nonlinear {
                hidden: vec![4],
                seed: 7,
            },
            seed: 2,
            sample_rate_hz: 100.0,
            trial_samples: 60,
            gap_samples: 20,
            band_hz: [0.5, 3.0],
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.channels == 0 || self.lag == 0 || self.trials == 0 || self.trial_samples < 2 {
            return bad("channels, lag and trials must be positive; trials need 2+ samples".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        let [lo, hi] = self.band_hz;
        if !(lo > 0.0 && lo < hi && hi < self.sample_rate_hz / 2.0) {
            return bad(format!("band {lo}-{hi} Hz must lie inside (0, Nyquist)"));
        }
        match &self.coupling {
            Coupling::Linear { beta: Some(b), .. } if b.len() != 3 * self.width() => bad(format!(
                "beta has {} entries; expected 3 x {} x {}",
                b.len(),
                self.channels,
                self.lag
            )),
            Coupling::Nonlinear { hidden, .. } if hidden.is_empty() || hidden.contains(&0) => {
                bad("nonlinear coupling needs at least one non-empty hidden layer".into())
            }
            _ => Ok(()),
        }
    }

    pub fn width(&self) -> usize {
        self.channels * self.lag
    }

    pub fn n_samples(&self) -> usize {
        self.lead() + self.trials * (self.trial_samples + self.gap_samples)
    }

    fn lead(&self) -> usize {
        self.lag + self.gap_samples
    }
}

/// A dense layer `out = W in + b`, `W` row-major `[out x in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TeacherLayer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// The noiseless map from a lag window (design-matrix feature order) to
/// the three axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    /// `beta` is axis-major, then channel, then lag.
    Linear { alpha: [f64; 3], beta: Vec<f64> },
    /// ReLU after every layer but the last.
    Nonlinear { layers: Vec<TeacherLayer> },
}

impl GroundTruth {
    pub fn apply(&self, window: &[f64]) -> [f64; 3] {
        match self {
            GroundTruth::Linear { alpha, beta } => {
                let d = window.len();
                let mut y = *alpha;
                for (a, v) in y.iter_mut().enumerate() {
                    *v += beta[a * d..(a + 1) * d]
                        .iter()
                        .zip(window)
                        .map(|(b, x)| b * x)
                        .sum::<f64>();
                }
                y
            }
            GroundTruth::Nonlinear { layers } => {
                let mut h = window.to_vec();
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.apply(&h);
                    if i + 1 < layers.len() {
                        h.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
                [h[0], h[1], h[2]]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub bundle: ParticipantBundle,
    pub truth: GroundTruth,
    /// Noiseless kinematics, one row per sample.
    pub clean: Vec<[f64; 3]>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Lag window at sample `t`; samples before the recording are zero.
fn window(eeg: &[Vec<f64>], t: usize, lag: usize, out: &mut [f64]) {
    for (n, ch) in eeg.iter().enumerate() {
        for l in 0..lag {
            out[n * lag + l] = if t >= l { ch[t - l] } else { 0.0 };
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let m = values.clone().sum::<f64>() / n;
    let v = values.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Unit-variance band-limited noise, rounded to `f32` so the stored bundle
/// holds exactly the values the kinematics were computed from.
fn colored_noise(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, HarnessError> {
    let [lo, hi] = spec.band_hz;
    let taps = num_taps_for_transition(spec.sample_rate_hz, lo);
    let filter = design_fir(DesignSpec::bandpass(lo, hi, spec.sample_rate_hz, taps))?;
    let n = spec.n_samples();
    let margin = 3 * taps + 1;
    let mut channels = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let white: Vec<f64> = (0..n + 2 * margin).map(|_| normal(rng)).collect();
        let band = filtfilt(&filter, &white)?;
        let ch = &band[margin..margin + n];
        let (m, s) = mean_std(ch.iter().copied());
        channels.push(ch.iter().map(|v| ((v - m) / s) as f32 as f64).collect());
    }
    Ok(channels)
}

fn teacher(spec: &SynthSpec, eeg: &[Vec<f64>], hidden: &[usize], seed: u64) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_samples();
    let mut acts: Vec<Vec<f64>> = {
        let mut w = vec![0.0; spec.width()];
        (0..n)
            .map(|t| {
                window(eeg, t, spec.lag, &mut w);
                w.clone()
            })
            .collect()
    };
    let mut layers = Vec::new();
    let widths: Vec<usize> = hidden.iter().copied().chain([3]).collect();
    let mut inputs = spec.width();
    for (i, &outputs) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut layer = TeacherLayer {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| normal(&mut rng) * scale)
                .collect(),
            bias: vec![0.0; outputs],
        };
        // standardize each unit over the recording; hidden units also get a
        // positive threshold so most of their input range is cut off
        let pre: Vec<Vec<f64>> = acts.iter().map(|a| layer.apply(a)).collect();
        for o in 0..outputs {
            let (m, s) = mean_std(pre.iter().map(|p| p[o]));
            let s = if s > 0.0 { s } else { 1.0 };
            let shift = if last {
                0.0
            } else {
                rng.random_range(0.5..1.5)
            };
            for w in &mut layer.weights[o * inputs..(o + 1) * inputs] {
                *w /= s;
            }
            layer.bias[o] = -m / s - shift;
        }
        acts = acts
            .iter()
            .map(|a| {
                let mut h = layer.apply(a);
                if !last {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h
            })
            .collect();
        inputs = outputs;
        layers.push(layer);
    }
    GroundTruth::Nonlinear { layers }
}

/// Builds a synthetic participant bundle and the coupling that produced it.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eeg = colored_noise(spec, &mut rng)?;
    let d = spec.width();
    let truth = match &spec.coupling {
        Coupling::Linear { alpha, beta } => {
            let alpha = alpha.unwrap_or_else(|| [0; 3].map(|_| rng.random_range(-1.0..1.0)));
            let beta = beta.clone().unwrap_or_else(|| {
                let scale = 1.0 / (d as f64).sqrt();
                (0..3 * d).map(|_| normal(&mut rng) * scale).collect()
            });
            GroundTruth::Linear { alpha, beta }
        }
        Coupling::Nonlinear { hidden, seed } => teacher(spec, &eeg, hidden, *seed),
    };
    let n = spec.n_samples();
    let mut w = vec![0.0; d];
    let clean: Vec<[f64; 3]> = (0..n)
        .map(|t| {
            window(&eeg, t, spec.lag, &mut w);
            truth.apply(&w)
        })
        .collect();
    let kin: Vec<[f64; 3]> = clean
        .iter()
        .map(|y| {
            if spec.noise_sigma > 0.0 {
                y.map(|v| v + spec.noise_sigma * normal(&mut rng))
            } else {
                *y
            }
        })
        .collect();

    let names: Vec<String> = if spec.channels <= MOTOR_CHANNELS.len() {
        MOTOR_CHANNELS[..spec.channels]
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        (1..=spec.channels).map(|i| format!("E{i}")).collect()
    };
    let fs = spec.sample_rate_hz;
    let events = (0..spec.trials)
        .map(|k| {
            let onset = spec.lead() + k * (spec.trial_samples + spec.gap_samples);
            TrialEvent {
                trial_id: k as u32 + 1,
                onset_s: onset as f64 / fs,
                rest_s: (onset + spec.trial_samples - 1) as f64 / fs,
            }
        })
        .collect();
    let bundle = ParticipantBundle::new(
        spec.participant_id.clone(),
        EegRecording::new(fs, names, eeg)?,
        KinematicsTrack::new(fs, kin)?,
        events,
        Provenance {
            source: "synthetic".into(),
            ica_cleaned: false,
        },
    )?;
    Ok(SynthOutput {
        bundle,
        truth,
        clean,
    })
}
