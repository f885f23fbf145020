use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{filtfilt, AxisRange, DesignSpec, FirFilter, SigprocError};

/// Kinematic axes in storage order.
pub const AXES: [&str; 3] = ["x", "y", "z"];

/// One fully parameterized entry of a preprocessing log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PreprocessStep {
    ZeroPhaseFir {
        design: DesignSpec,
    },
    AverageReference,
    Downsample {
        factor: usize,
        from_hz: f64,
        to_hz: f64,
    },
    SelectChannels {
        names: Vec<String>,
    },
}

/// Keeps samples `0, factor, 2*factor, ...`.
///
/// ```
/// use kinedecode::sigproc::decimate;
/// let x: Vec<i32> = (1..=10).collect();
/// assert_eq!(decimate(&x, 5).unwrap(), vec![1, 6]);
/// ```
pub fn decimate<T: Copy>(signal: &[T], factor: usize) -> Result<Vec<T>, SigprocError> {
    if factor == 0 {
        return Err(SigprocError::InvalidFactor(factor));
    }
    Ok(signal.iter().step_by(factor).copied().collect())
}

/// Multichannel EEG, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    sample_rate_hz: f64,
    channel_names: Vec<String>,
    data: Vec<Vec<f64>>,
    log: Vec<PreprocessStep>,
}

impl EegRecording {
    pub fn new(
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        data: Vec<Vec<f64>>,
    ) -> Result<Self, SigprocError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(SigprocError::InvalidRecording(format!(
                "sample rate {sample_rate_hz} must be positive"
            )));
        }
        if channel_names.len() != data.len() {
            return Err(SigprocError::InvalidRecording(format!(
                "{} channel names for {} data rows",
                channel_names.len(),
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = channel_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(SigprocError::InvalidRecording(format!(
                "duplicate channel name {dup}"
            )));
        }
        if let Some(first) = data.first() {
            if data.iter().any(|row| row.len() != first.len()) {
                return Err(SigprocError::InvalidRecording(
                    "channels have differing sample counts".into(),
                ));
            }
        }
        Ok(Self {
            sample_rate_hz,
            channel_names,
            data,
            log: Vec::new(),
        })
    }

    pub fn with_log(mut self, log: Vec<PreprocessStep>) -> Self {
        self.log = log;
        self
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channel_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn log(&self) -> &[PreprocessStep] {
        &self.log
    }

    /// Rebuilds the recording around new channel data, appending `step`.
    pub(crate) fn derive(
        &self,
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        data: Vec<Vec<f64>>,
        step: PreprocessStep,
    ) -> Self {
        let mut log = self.log.clone();
        log.push(step);
        Self {
            sample_rate_hz,
            channel_names,
            data,
            log,
        }
    }

    pub fn filtfilt(&self, filter: &FirFilter) -> Result<Self, SigprocError> {
        let data = self
            .data
            .iter()
            .map(|ch| filtfilt(filter, ch))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.derive(
            self.sample_rate_hz,
            self.channel_names.clone(),
            data,
            PreprocessStep::ZeroPhaseFir {
                design: *filter.spec(),
            },
        ))
    }

    pub fn downsample(&self, factor: usize) -> Result<Self, SigprocError> {
        let data = self
            .data
            .iter()
            .map(|ch| decimate(ch, factor))
            .collect::<Result<Vec<_>, _>>()?;
        let to_hz = self.sample_rate_hz / factor as f64;
        Ok(self.derive(
            to_hz,
            self.channel_names.clone(),
            data,
            PreprocessStep::Downsample {
                factor,
                from_hz: self.sample_rate_hz,
                to_hz,
            },
        ))
    }
}

/// Subtracts the cross-channel mean from every sample column.
pub fn rereference_average(rec: &EegRecording) -> Result<EegRecording, SigprocError> {
    let n_ch = rec.n_channels();
    if n_ch < 2 {
        return Err(SigprocError::NeedsMultipleChannels);
    }
    let mut data = rec.data.clone();
    for t in 0..rec.n_samples() {
        let mean = rec.data.iter().map(|ch| ch[t]).sum::<f64>() / n_ch as f64;
        data.iter_mut().for_each(|ch| ch[t] -= mean);
    }
    Ok(rec.derive(
        rec.sample_rate_hz,
        rec.channel_names.clone(),
        data,
        PreprocessStep::AverageReference,
    ))
}

/// 3-D hand position over time, one `[x, y, z]` row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicsTrack {
    sample_rate_hz: f64,
    data: Vec<[f64; 3]>,
    normalization: Option<[AxisRange; 3]>,
    log: Vec<PreprocessStep>,
}

impl KinematicsTrack {
    pub fn new(sample_rate_hz: f64, data: Vec<[f64; 3]>) -> Result<Self, SigprocError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(SigprocError::InvalidRecording(format!(
                "sample rate {sample_rate_hz} must be positive"
            )));
        }
        Ok(Self {
            sample_rate_hz,
            data,
            normalization: None,
            log: Vec::new(),
        })
    }

    pub fn with_log(mut self, log: Vec<PreprocessStep>) -> Self {
        self.log = log;
        self
    }

    pub(crate) fn with_normalization(mut self, params: Option<[AxisRange; 3]>) -> Self {
        self.normalization = params;
        self
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.data.iter().map(|r| r[axis]).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.data.len() as f64 / self.sample_rate_hz
    }

    pub fn normalization(&self) -> Option<&[AxisRange; 3]> {
        self.normalization.as_ref()
    }

    pub fn log(&self) -> &[PreprocessStep] {
        &self.log
    }

    fn from_axes(&self, sample_rate_hz: f64, axes: [Vec<f64>; 3], step: PreprocessStep) -> Self {
        let data = (0..axes[0].len())
            .map(|i| [axes[0][i], axes[1][i], axes[2][i]])
            .collect();
        let mut log = self.log.clone();
        log.push(step);
        Self {
            sample_rate_hz,
            data,
            normalization: self.normalization,
            log,
        }
    }

    pub fn filtfilt(&self, filter: &FirFilter) -> Result<Self, SigprocError> {
        let axes = [
            filtfilt(filter, &self.axis(0))?,
            filtfilt(filter, &self.axis(1))?,
            filtfilt(filter, &self.axis(2))?,
        ];
        Ok(self.from_axes(
            self.sample_rate_hz,
            axes,
            PreprocessStep::ZeroPhaseFir {
                design: *filter.spec(),
            },
        ))
    }

    pub fn downsample(&self, factor: usize) -> Result<Self, SigprocError> {
        let data = decimate(&self.data, factor)?;
        let to_hz = self.sample_rate_hz / factor as f64;
        let mut log = self.log.clone();
        log.push(PreprocessStep::Downsample {
            factor,
            from_hz: self.sample_rate_hz,
            to_hz,
        });
        Ok(Self {
            sample_rate_hz: to_hz,
            data,
            normalization: self.normalization,
            log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(data: Vec<Vec<f64>>) -> EegRecording {
        let names = (0..data.len()).map(|i| format!("ch{i}")).collect();
        EegRecording::new(500.0, names, data).unwrap()
    }

    #[test]
    fn decimate_examples() {
        let x: Vec<f64> = (0..37).map(f64::from).collect();
        assert_eq!(decimate(&x, 1).unwrap(), x);
        assert_eq!(decimate(&x, 0), Err(SigprocError::InvalidFactor(0)));
        let r = rec(vec![vec![0.0; 5000]; 2]).downsample(5).unwrap();
        assert_eq!(r.n_samples(), 1000);
        assert_eq!(r.sample_rate_hz(), 100.0);
        assert!(matches!(
            r.log()[0],
            PreprocessStep::Downsample { factor: 5, .. }
        ));
    }

    #[test]
    fn rereference_examples() {
        let r = rereference_average(&rec(vec![vec![3.0], vec![1.0]])).unwrap();
        assert_eq!(r.data(), &[vec![1.0], vec![-1.0]]);
        let same = rereference_average(&rec(vec![vec![2.0, -4.0]; 3])).unwrap();
        assert!(same.data().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(
            rereference_average(&rec(vec![vec![1.0, 2.0]])),
            Err(SigprocError::NeedsMultipleChannels)
        );
    }

    #[test]
    fn rejects_duplicate_and_ragged_channels() {
        assert!(
            EegRecording::new(1.0, vec!["a".into(), "a".into()], vec![vec![], vec![]]).is_err()
        );
        assert!(
            EegRecording::new(1.0, vec!["a".into(), "b".into()], vec![vec![1.0], vec![]]).is_err()
        );
        assert!(EegRecording::new(0.0, vec![], vec![]).is_err());
    }
}
