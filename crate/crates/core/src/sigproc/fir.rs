//! Windowed-sinc FIR design and forward-backward (zero-phase) filtering.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::SigprocError;

/// Above this many taps the causal filter runs through an FFT.
const DIRECT_CONV_MAX_TAPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Lowpass { cutoff_hz: f64 },
    Highpass { cutoff_hz: f64 },
    Bandpass { low_hz: f64, high_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hamming,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hamming if n == 1 => vec![1.0],
            Window::Hamming => (0..n)
                .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    pub sample_rate_hz: f64,
    pub num_taps: usize,
    #[serde(default)]
    pub window: Window,
}

impl DesignSpec {
    pub fn lowpass(cutoff_hz: f64, sample_rate_hz: f64, num_taps: usize) -> Self {
        Self {
            kind: FilterKind::Lowpass { cutoff_hz },
            sample_rate_hz,
            num_taps,
            window: Window::Hamming,
        }
    }

    pub fn highpass(cutoff_hz: f64, sample_rate_hz: f64, num_taps: usize) -> Self {
        Self {
            kind: FilterKind::Highpass { cutoff_hz },
            sample_rate_hz,
            num_taps,
            window: Window::Hamming,
        }
    }

    pub fn bandpass(low_hz: f64, high_hz: f64, sample_rate_hz: f64, num_taps: usize) -> Self {
        Self {
            kind: FilterKind::Bandpass { low_hz, high_hz },
            sample_rate_hz,
            num_taps,
            window: Window::Hamming,
        }
    }

    /// Frequency at which the designed response is normalized to unit gain.
    pub fn passband_center_hz(&self) -> f64 {
        match self.kind {
            FilterKind::Lowpass { .. } => 0.0,
            FilterKind::Highpass { .. } => self.sample_rate_hz / 2.0,
            FilterKind::Bandpass { low_hz, high_hz } => 0.5 * (low_hz + high_hz),
        }
    }
}

/// Odd tap count from the Hamming rule `ceil(3.3 / (transition / fs))`.
///
/// ```
/// use kinedecode::sigproc::num_taps_for_transition;
/// assert_eq!(num_taps_for_transition(500.0, 0.5), 3301);
/// assert_eq!(num_taps_for_transition(100.0, 0.25), 1321);
/// assert_eq!(num_taps_for_transition(100.0, 0.5), 661);
/// ```
pub fn num_taps_for_transition(sample_rate_hz: f64, transition_hz: f64) -> usize {
    // the epsilon absorbs representation error in products like 3.3 * 500 / 0.5
    let n = (3.3 * sample_rate_hz / transition_hz - 1e-9)
        .ceil()
        .max(1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// A symmetric (type-I linear phase) FIR filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    coefficients: Vec<f64>,
    spec: DesignSpec,
}

impl FirFilter {
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }

    pub fn num_taps(&self) -> usize {
        self.coefficients.len()
    }

    /// Complex single-pass frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex<f64> {
        let omega = 2.0 * PI * freq_hz / self.spec.sample_rate_hz;
        self.coefficients
            .iter()
            .enumerate()
            .fold(Complex::new(0.0, 0.0), |acc, (k, &h)| {
                acc + Complex::from_polar(h, -omega * k as f64)
            })
    }

    /// Magnitude of the forward-backward response, i.e. |H(f)|^2.
    pub fn zero_phase_gain(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm_sqr()
    }
}

fn ideal_lowpass(cutoff_hz: f64, sample_rate_hz: f64, n: usize) -> Vec<f64> {
    let fc = 2.0 * cutoff_hz / sample_rate_hz; // fraction of Nyquist
    let mid = (n - 1) as f64 / 2.0;
    (0..n)
        .map(|k| {
            let x = k as f64 - mid;
            if x == 0.0 {
                fc
            } else {
                (PI * fc * x).sin() / (PI * x)
            }
        })
        .collect()
}

pub fn design_fir(spec: DesignSpec) -> Result<FirFilter, SigprocError> {
    let fs = spec.sample_rate_hz;
    if !(fs.is_finite() && fs > 0.0) {
        return Err(SigprocError::InvalidCutoff(format!(
            "sample rate {fs} must be positive"
        )));
    }
    let nyquist = fs / 2.0;
    let check = |f: f64| {
        if f.is_finite() && f > 0.0 && f < nyquist {
            Ok(())
        } else {
            Err(SigprocError::InvalidCutoff(format!(
                "{f} Hz is outside (0, {nyquist}) Hz"
            )))
        }
    };
    match spec.kind {
        FilterKind::Lowpass { cutoff_hz } | FilterKind::Highpass { cutoff_hz } => check(cutoff_hz)?,
        FilterKind::Bandpass { low_hz, high_hz } => {
            check(low_hz)?;
            check(high_hz)?;
            if low_hz >= high_hz {
                return Err(SigprocError::InvalidCutoff(format!(
                    "band edges {low_hz} and {high_hz} Hz are not increasing"
                )));
            }
        }
    }
    let n = spec.num_taps;
    if n == 0 || n % 2 == 0 {
        return Err(SigprocError::InvalidTaps(n));
    }

    let ideal = match spec.kind {
        FilterKind::Lowpass { cutoff_hz } => ideal_lowpass(cutoff_hz, fs, n),
        FilterKind::Highpass { cutoff_hz } => {
            let mut h: Vec<f64> = ideal_lowpass(cutoff_hz, fs, n).iter().map(|v| -v).collect();
            h[n / 2] += 1.0;
            h
        }
        FilterKind::Bandpass { low_hz, high_hz } => ideal_lowpass(high_hz, fs, n)
            .iter()
            .zip(ideal_lowpass(low_hz, fs, n))
            .map(|(hi, lo)| hi - lo)
            .collect(),
    };
    let window = spec.window.coefficients(n);
    let mut coefficients: Vec<f64> = ideal.iter().zip(&window).map(|(h, w)| h * w).collect();
    // sin/cos round differently on either side of the centre; mirror so the
    // taps are exactly symmetric
    for k in 0..n / 2 {
        coefficients[n - 1 - k] = coefficients[k];
    }

    let mut filter = FirFilter { coefficients, spec };
    let gain = filter.response(spec.passband_center_hz()).norm();
    filter.coefficients.iter_mut().for_each(|c| *c /= gain);
    Ok(filter)
}

/// Causal FIR filtering with zero initial state; output has the input's length.
pub fn fir_apply(taps: &[f64], signal: &[f64]) -> Vec<f64> {
    if taps.is_empty() || signal.is_empty() {
        return vec![0.0; signal.len()];
    }
    if taps.len() <= DIRECT_CONV_MAX_TAPS {
        return (0..signal.len())
            .map(|n| {
                taps.iter()
                    .take(n + 1)
                    .enumerate()
                    .map(|(k, h)| h * signal[n - k])
                    .sum()
            })
            .collect();
    }

    let full = signal.len() + taps.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut a: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = taps.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a.iter().take(signal.len()).map(|c| c.re * scale).collect()
}

/// Zero-phase filtering: pad by odd reflection of `3 * num_taps` samples,
/// filter forward, reverse, filter again, reverse, strip the padding.
pub fn filtfilt(filter: &FirFilter, signal: &[f64]) -> Result<Vec<f64>, SigprocError> {
    let pad = 3 * filter.num_taps();
    if signal.len() <= pad {
        return Err(SigprocError::SignalTooShort {
            len: signal.len(),
            num_taps: filter.num_taps(),
            needed: pad,
        });
    }
    let n = signal.len();
    let first = signal[0];
    let last = signal[n - 1];
    let mut padded = Vec::with_capacity(n + 2 * pad);
    padded.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    padded.extend_from_slice(signal);
    padded.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let taps = filter.coefficients();
    let mut y = fir_apply(taps, &padded);
    y.reverse();
    let mut y = fir_apply(taps, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn nyquist_limit_single_tap_is_identity() {
        let f = design_fir(DesignSpec::lowpass(50.0 * (1.0 - 1e-9), 100.0, 1)).unwrap();
        assert_eq!(f.coefficients().len(), 1);
        assert!((f.coefficients()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_cutoffs_and_taps() {
        assert!(matches!(
            design_fir(DesignSpec::lowpass(50.0, 100.0, 11)),
            Err(SigprocError::InvalidCutoff(_))
        ));
        assert!(matches!(
            design_fir(DesignSpec::bandpass(3.0, 0.5, 100.0, 11)),
            Err(SigprocError::InvalidCutoff(_))
        ));
        assert!(matches!(
            design_fir(DesignSpec::lowpass(2.0, 100.0, 10)),
            Err(SigprocError::InvalidTaps(10))
        ));
        assert!(matches!(
            design_fir(DesignSpec::lowpass(2.0, 100.0, 0)),
            Err(SigprocError::InvalidTaps(0))
        ));
    }

    #[test]
    fn highpass_blocks_dc() {
        let f = design_fir(DesignSpec::highpass(10.0, 100.0, 101)).unwrap();
        assert!(db(f.response(0.0).norm()) < -40.0);
        assert!((f.response(50.0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bandpass_delta_band_example() {
        let f = design_fir(DesignSpec::bandpass(0.5, 3.0, 100.0, 1321)).unwrap();
        assert!(db(f.response(1.75).norm()).abs() < 1.0);
        assert!(db(f.response(10.0).norm()) <= -40.0);
    }

    #[test]
    fn zeros_stay_zero() {
        let f = design_fir(DesignSpec::lowpass(2.0, 100.0, 101)).unwrap();
        let y = filtfilt(&f, &vec![0.0; 500]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_signal_errors() {
        let f = design_fir(DesignSpec::lowpass(2.0, 100.0, 101)).unwrap();
        assert!(matches!(
            filtfilt(&f, &vec![1.0; 303]),
            Err(SigprocError::SignalTooShort { .. })
        ));
        assert!(filtfilt(&f, &vec![1.0; 304]).is_ok());
    }

    #[test]
    fn fft_and_direct_paths_agree() {
        let taps: Vec<f64> = (0..200)
            .map(|k| ((k * 7 % 13) as f64 - 6.0) / 10.0)
            .collect();
        let signal: Vec<f64> = (0..1000).map(|n| ((n as f64) * 0.37).sin()).collect();
        let fast = fir_apply(&taps, &signal);
        for n in [0usize, 1, 150, 199, 200, 999] {
            let direct: f64 = (0..taps.len().min(n + 1))
                .map(|k| taps[k] * signal[n - k])
                .sum();
            assert!((fast[n] - direct).abs() < 1e-10, "n={n}");
        }
    }
}
