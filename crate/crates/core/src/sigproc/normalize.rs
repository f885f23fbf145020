//! Z-normalization for EEG channels and min-max scaling for kinematics.
//!
//! Both are split into a `fit` that measures statistics and an `apply` that
//! uses stored statistics, so the statistics can come from a training split
//! and be reused unchanged on held-out data.

use serde::{Deserialize, Serialize};

use super::{KinematicsTrack, SigprocError};

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(n_channels: usize) -> Self {
        Self {
            mean: vec![0.0; n_channels],
            std: vec![1.0; n_channels],
        }
    }
}

/// Measures each channel (row) of a channel-major matrix.
///
/// ```
/// use kinedecode::sigproc::{zscore_apply, zscore_fit};
/// let data = vec![vec![1.0, 2.0, 3.0]];
/// let stats = zscore_fit(&data).unwrap();
/// assert!((stats.std[0] - 0.816497).abs() < 1e-6);
/// let z = zscore_apply(&data, &stats).unwrap();
/// assert!((z[0][0] + 1.224745).abs() < 1e-6);
/// ```
pub fn zscore_fit(data: &[Vec<f64>]) -> Result<ChannelStats, SigprocError> {
    let mut mean = Vec::with_capacity(data.len());
    let mut std = Vec::with_capacity(data.len());
    for (index, ch) in data.iter().enumerate() {
        let n = ch.len() as f64;
        let m = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        if !(s > 0.0 && s.is_finite()) || s <= 1e-12 * m.abs() {
            return Err(SigprocError::ZeroVariance { index });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(ChannelStats { mean, std })
}

fn check_channels(data: &[Vec<f64>], stats: &ChannelStats) -> Result<(), SigprocError> {
    if data.len() != stats.n_channels() {
        return Err(SigprocError::ChannelCountMismatch {
            expected: stats.n_channels(),
            actual: data.len(),
        });
    }
    Ok(())
}

pub fn zscore_apply(
    data: &[Vec<f64>],
    stats: &ChannelStats,
) -> Result<Vec<Vec<f64>>, SigprocError> {
    check_channels(data, stats)?;
    Ok(data
        .iter()
        .enumerate()
        .map(|(c, ch)| {
            ch.iter()
                .map(|v| (v - stats.mean[c]) / stats.std[c])
                .collect()
        })
        .collect())
}

pub fn zscore_invert(
    data: &[Vec<f64>],
    stats: &ChannelStats,
) -> Result<Vec<Vec<f64>>, SigprocError> {
    check_channels(data, stats)?;
    Ok(data
        .iter()
        .enumerate()
        .map(|(c, ch)| {
            ch.iter()
                .map(|v| v * stats.std[c] + stats.mean[c])
                .collect()
        })
        .collect())
}

/// Observed range of one kinematic axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

pub fn minmax_fit_rows(rows: &[[f64; 3]]) -> Result<[AxisRange; 3], SigprocError> {
    let mut ranges = [AxisRange {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    }; 3];
    for row in rows {
        for (r, &v) in ranges.iter_mut().zip(row) {
            r.min = r.min.min(v);
            r.max = r.max.max(v);
        }
    }
    for (axis, r) in ranges.iter().enumerate() {
        if !(r.max > r.min) || !(r.max - r.min).is_finite() {
            return Err(SigprocError::DegenerateRange { axis });
        }
    }
    Ok(ranges)
}

pub fn minmax_apply_rows(rows: &[[f64; 3]], params: &[AxisRange; 3]) -> Vec<[f64; 3]> {
    rows.iter()
        .map(|r| std::array::from_fn(|a| params[a].apply(r[a])))
        .collect()
}

pub fn minmax_invert_rows(rows: &[[f64; 3]], params: &[AxisRange; 3]) -> Vec<[f64; 3]> {
    rows.iter()
        .map(|r| std::array::from_fn(|a| params[a].invert(r[a])))
        .collect()
}

pub fn minmax_fit(track: &KinematicsTrack) -> Result<[AxisRange; 3], SigprocError> {
    minmax_fit_rows(track.data())
}

/// Affine map onto the fitted `[0, 1]` span; values outside the fitted range
/// are mapped, not clamped.
pub fn minmax_apply(track: &KinematicsTrack, params: &[AxisRange; 3]) -> KinematicsTrack {
    KinematicsTrack::new(
        track.sample_rate_hz(),
        minmax_apply_rows(track.data(), params),
    )
    .expect("sample rate already validated")
    .with_log(track.log().to_vec())
    .with_normalization(Some(*params))
}

pub fn minmax_invert(track: &KinematicsTrack, params: &[AxisRange; 3]) -> KinematicsTrack {
    KinematicsTrack::new(
        track.sample_rate_hz(),
        minmax_invert_rows(track.data(), params),
    )
    .expect("sample rate already validated")
    .with_log(track.log().to_vec())
}
