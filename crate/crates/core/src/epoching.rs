//! Channel selection, per-trial segmentation and lag embedding.
//!
//! Row `t` of a [`DesignMatrix`] holds, for every channel `n`, the samples at
//! `t, t-1, ..., t-L+1`. Features are channel-major: index `n * L + l` is
//! channel `n` at lag `l` (`l = 0` is the current sample).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ParticipantBundle;
use crate::sigproc::{zscore_fit, ChannelStats, EegRecording, PreprocessStep, SigprocError};

/// The 21 motor-cortex and occipital electrodes used for decoding, in order.
pub const MOTOR_CHANNELS: [&str; 21] = [
    "F3", "Fz", "F4", "FC5", "FC1", "FC2", "FC6", "C3", "Cz", "C4", "CP5", "CP1", "CP2", "CP6",
    "P7", "P3", "Pz", "P4", "O1", "Oz", "O2",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpochError {
    #[error("channel {0} not found in recording")]
    ChannelNotFound(String),
    #[error("invalid channel layout: {0}")]
    InvalidLayout(String),
    #[error("no trials survived epoching ({dropped} dropped)")]
    EmptyEpochSet { dropped: usize },
    #[error("requested {requested} trials but only {available} are available")]
    NotEnoughTrials { requested: usize, available: usize },
    #[error("EEG at {eeg_hz} Hz and kinematics at {kin_hz} Hz must share one rate")]
    RateMismatch { eeg_hz: f64, kin_hz: f64 },
    #[error("lag must be at least one sample")]
    InvalidLag,
    #[error("design has {actual} features; expected {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Signal(#[from] SigprocError),
}

/// Ordered electrode labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    names: Vec<String>,
}

impl ChannelLayout {
    /// The fixed 21-electrode layout.
    pub fn motor() -> Self {
        Self {
            names: MOTOR_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// A custom layout; names must be non-empty and unique.
    pub fn new(names: Vec<String>) -> Result<Self, EpochError> {
        let mut seen = std::collections::HashSet::new();
        if names.is_empty() {
            return Err(EpochError::InvalidLayout("no channels".into()));
        }
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(EpochError::InvalidLayout(format!("duplicate channel {dup}")));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self::motor()
    }
}

/// Restricts `rec` to the layout's channels in layout order.
pub fn select_channels(
    rec: &EegRecording,
    layout: &ChannelLayout,
) -> Result<EegRecording, EpochError> {
    if rec.channel_names() == layout.names() {
        return Ok(rec.clone());
    }
    let data = layout
        .names()
        .iter()
        .map(|name| {
            rec.channel(name)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| EpochError::ChannelNotFound(name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rec.derive(
        rec.sample_rate_hz(),
        layout.names().to_vec(),
        data,
        PreprocessStep::SelectChannels {
            names: layout.names().to_vec(),
        },
    ))
}

/// Lag-embedded EEG, row-major `[rows x (channels * lags)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    lag_count: usize,
    channel_count: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_vec(
        rows: usize,
        channel_count: usize,
        lag_count: usize,
        data: Vec<f64>,
    ) -> Result<Self, EpochError> {
        let expected = rows * channel_count * lag_count;
        if data.len() != expected || lag_count == 0 {
            return Err(EpochError::WidthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows,
            lag_count,
            channel_count,
            data,
        })
    }

    /// Embeds rows `times` of channel-major `channels`; every time must be at
    /// least `lag - 1`.
    pub fn embed(
        channels: &[Vec<f64>],
        times: std::ops::RangeInclusive<usize>,
        lag: usize,
    ) -> Result<Self, EpochError> {
        if lag == 0 {
            return Err(EpochError::InvalidLag);
        }
        let n_ch = channels.len();
        let rows = times.clone().count();
        let mut data = Vec::with_capacity(rows * n_ch * lag);
        for t in times {
            assert!(t + 1 >= lag, "row {t} reaches before sample 0 at lag {lag}");
            for ch in channels {
                data.extend((0..lag).map(|l| ch[t - l]));
            }
        }
        Ok(Self {
            rows,
            lag_count: lag,
            channel_count: n_ch,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.lag_count * self.channel_count
    }

    pub fn lag_count(&self) -> usize {
        self.lag_count
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn feature_index(&self, channel: usize, lag: usize) -> usize {
        channel * self.lag_count + lag
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn get(&self, t: usize, channel: usize, lag: usize) -> f64 {
        self.row(t)[self.feature_index(channel, lag)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenates designs sharing a layout.
    pub fn stack<'a>(
        parts: impl IntoIterator<Item = &'a DesignMatrix>,
    ) -> Result<Self, EpochError> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or(EpochError::EmptyEpochSet { dropped: 0 })?;
        let mut out = first.clone();
        for d in iter {
            if d.lag_count != out.lag_count || d.channel_count != out.channel_count {
                return Err(EpochError::WidthMismatch {
                    expected: out.width(),
                    actual: d.width(),
                });
            }
            out.data.extend_from_slice(&d.data);
            out.rows += d.rows;
        }
        Ok(out)
    }

    /// Z-scores every feature with its channel's statistics.
    pub fn standardized(&self, stats: &ChannelStats) -> Result<Self, EpochError> {
        if stats.n_channels() != self.channel_count {
            return Err(SigprocError::ChannelCountMismatch {
                expected: stats.n_channels(),
                actual: self.channel_count,
            }
            .into());
        }
        let mut out = self.clone();
        let l = self.lag_count;
        for row in out.data.chunks_exact_mut(self.width()) {
            for (i, v) in row.iter_mut().enumerate() {
                let c = i / l;
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
        Ok(out)
    }

    /// Per-channel samples at lag 0, i.e. the EEG the rows are aligned to.
    pub fn current_samples(&self) -> Vec<Vec<f64>> {
        (0..self.channel_count)
            .map(|c| (0..self.rows).map(|t| self.get(t, c, 0)).collect())
            .collect()
    }
}

/// One trial: lagged EEG rows aligned with kinematic targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTensorPair {
    pub trial_id: u32,
    /// Sample index of movement onset (row 0) in the source recording.
    pub onset_index: usize,
    pub design: DesignMatrix,
    pub target: Vec<[f64; 3]>,
}

impl TrialTensorPair {
    pub fn rows(&self) -> usize {
        self.target.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedTrial {
    pub trial_id: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub pairs: Vec<TrialTensorPair>,
    pub dropped: Vec<DroppedTrial>,
}

/// Cuts each trial from movement onset to rest and embeds `lag` samples of
/// EEG per row. Trials whose first window would start before the recording
/// are dropped and reported.
pub fn epoch_trials(bundle: &ParticipantBundle, lag: usize) -> Result<EpochSet, EpochError> {
    if lag == 0 {
        return Err(EpochError::InvalidLag);
    }
    let rec = &bundle.recording;
    let kin = &bundle.kinematics;
    let fs = rec.sample_rate_hz();
    if (fs - kin.sample_rate_hz()).abs() > 1e-9 * fs {
        return Err(EpochError::RateMismatch {
            eeg_hz: fs,
            kin_hz: kin.sample_rate_hz(),
        });
    }
    let last = rec.n_samples().min(kin.n_samples());
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for ev in &bundle.events {
        let onset = (ev.onset_s * fs).round() as usize;
        let rest = ((ev.rest_s * fs).round() as usize).min(last.saturating_sub(1));
        if onset + 1 < lag {
            dropped.push(DroppedTrial {
                trial_id: ev.trial_id,
                reason: format!(
                    "onset at sample {onset} leaves fewer than {lag} samples of pre-movement EEG"
                ),
            });
            continue;
        }
        if rest < onset {
            dropped.push(DroppedTrial {
                trial_id: ev.trial_id,
                reason: "trial extends past the end of the recording".into(),
            });
            continue;
        }
        pairs.push(TrialTensorPair {
            trial_id: ev.trial_id,
            onset_index: onset,
            design: DesignMatrix::embed(rec.data(), onset..=rest, lag)?,
            target: kin.data()[onset..=rest].to_vec(),
        });
    }
    if pairs.is_empty() {
        return Err(EpochError::EmptyEpochSet {
            dropped: dropped.len(),
        });
    }
    Ok(EpochSet { pairs, dropped })
}

/// Channel statistics over the lag-0 samples of every row in `pairs`.
pub fn fit_channel_stats(pairs: &[TrialTensorPair]) -> Result<ChannelStats, EpochError> {
    let first = pairs
        .first()
        .ok_or(EpochError::EmptyEpochSet { dropped: 0 })?;
    let mut pooled = vec![Vec::new(); first.design.channel_count()];
    for p in pairs {
        for (acc, ch) in pooled.iter_mut().zip(p.design.current_samples()) {
            acc.extend(ch);
        }
    }
    Ok(zscore_fit(&pooled)?)
}

/// Disjoint train / validation / test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Deterministically shuffles `items` by `seed` and takes the first
/// `train_n`, next `val_n`, next `test_n`; leftovers are discarded.
pub fn split_trials<T>(
    items: Vec<T>,
    train_n: usize,
    val_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<TrialSplit<T>, EpochError> {
    let requested = train_n + val_n + test_n;
    if requested > items.len() {
        return Err(EpochError::NotEnoughTrials {
            requested,
            available: items.len(),
        });
    }
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect()
    };
    let train = take(0..train_n);
    let val = take(train_n..train_n + val_n);
    let test = take(train_n + val_n..requested);
    Ok(TrialSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Provenance, TrialEvent};
    use crate::sigproc::KinematicsTrack;

    fn bundle(channels: Vec<Vec<f64>>, events: Vec<TrialEvent>) -> ParticipantBundle {
        let n = channels[0].len();
        let names = (0..channels.len()).map(|i| format!("E{i}")).collect();
        let rec = EegRecording::new(100.0, names, channels).unwrap();
        let kin = KinematicsTrack::new(
            100.0,
            (0..n).map(|t| [t as f64, 2.0 * t as f64, 0.0]).collect(),
        )
        .unwrap();
        ParticipantBundle::new(
            "T",
            rec,
            kin,
            events,
            Provenance {
                source: "test".into(),
                ica_cleaned: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn hand_enumerated_embedding() {
        let b = bundle(
            vec![vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 3.0, 4.0]],
            vec![TrialEvent {
                trial_id: 1,
                onset_s: 0.02,
                rest_s: 0.03,
            }],
        );
        let set = epoch_trials(&b, 2).unwrap();
        let p = &set.pairs[0];
        assert_eq!(p.design.row(0), &[0.3, 0.2, 3.0, 2.0]);
        assert_eq!(p.design.row(1), &[0.4, 0.3, 4.0, 3.0]);
        assert_eq!(p.target, vec![[2.0, 4.0, 0.0], [3.0, 6.0, 0.0]]);
    }

    #[test]
    fn first_row_reaches_lag_samples_before_onset() {
        // 15 taps at 100 Hz: the window at onset covers samples onset-14..=onset,
        // i.e. the 150 ms ending at onset.
        let ramp: Vec<f64> = (0..100).map(f64::from).collect();
        let b = bundle(
            vec![ramp.clone(), ramp],
            vec![TrialEvent {
                trial_id: 1,
                onset_s: 0.5,
                rest_s: 0.6,
            }],
        );
        let p = &epoch_trials(&b, 15).unwrap().pairs[0];
        assert_eq!(p.design.get(0, 0, 0), 50.0);
        assert_eq!(p.design.get(0, 0, 14), 36.0);
        assert_eq!(p.design.width(), 30);
    }

    #[test]
    fn early_trial_is_dropped() {
        let sig: Vec<f64> = (0..200).map(|t| (t as f64).sin()).collect();
        let b = bundle(
            vec![sig.clone(), sig],
            vec![
                TrialEvent {
                    trial_id: 1,
                    onset_s: 0.03,
                    rest_s: 0.2,
                },
                TrialEvent {
                    trial_id: 2,
                    onset_s: 0.5,
                    rest_s: 0.7,
                },
            ],
        );
        let set = epoch_trials(&b, 15).unwrap();
        assert_eq!(set.dropped.len(), 1);
        assert_eq!(set.dropped[0].trial_id, 1);
        assert_eq!(set.pairs.len(), 1);

        let only_early = bundle(
            vec![vec![1.0; 50], vec![2.0; 50]],
            vec![TrialEvent {
                trial_id: 1,
                onset_s: 0.03,
                rest_s: 0.2,
            }],
        );
        assert_eq!(
            epoch_trials(&only_early, 15),
            Err(EpochError::EmptyEpochSet { dropped: 1 })
        );
    }

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn selection_order_missing_and_idempotence() {
        let mut all = names(&MOTOR_CHANNELS);
        all.reverse();
        all.extend(names(&[
            "Fp1", "Fp2", "T7", "T8", "TP9", "TP10", "PO9", "PO10", "F7", "F8", "FT9",
        ]));
        let data = (0..all.len()).map(|i| vec![i as f64; 4]).collect();
        let rec = EegRecording::new(500.0, all.clone(), data).unwrap();
        assert_eq!(rec.n_channels(), 32);
        let sel = select_channels(&rec, &ChannelLayout::motor()).unwrap();
        assert_eq!(sel.n_channels(), 21);
        assert_eq!(sel.channel_names()[0], "F3");
        assert_eq!(sel.data()[0][0], 20.0);
        assert_eq!(select_channels(&sel, &ChannelLayout::motor()).unwrap(), sel);

        let no_cz: Vec<String> = all.iter().filter(|n| *n != "Cz").cloned().collect();
        let data = vec![vec![0.0; 4]; no_cz.len()];
        let rec = EegRecording::new(500.0, no_cz, data).unwrap();
        assert_eq!(
            select_channels(&rec, &ChannelLayout::motor()),
            Err(EpochError::ChannelNotFound("Cz".into()))
        );
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<u32> = (0..294).collect();
        let s = split_trials(ids.clone(), 234, 30, 30, 11).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (234, 30, 30));
        let mut all: Vec<u32> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(split_trials(ids.clone(), 234, 30, 30, 11).unwrap(), s);
        let other = split_trials(ids.clone(), 234, 30, 30, 12).unwrap();
        assert_ne!(other, s);
        assert_eq!(
            split_trials(ids, 250, 30, 30, 1).unwrap_err(),
            EpochError::NotEnoughTrials {
                requested: 310,
                available: 294
            }
        );
    }

    #[test]
    fn standardize_uses_channel_stats() {
        let d = DesignMatrix::from_vec(1, 2, 2, vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let stats = ChannelStats {
            mean: vec![1.0, 10.0],
            std: vec![2.0, 5.0],
        };
        assert_eq!(
            d.standardized(&stats).unwrap().row(0),
            &[0.0, 1.0, 0.0, 2.0]
        );
    }
}
