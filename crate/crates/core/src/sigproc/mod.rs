//! Signal conditioning for EEG and hand kinematics.
//!
//! Everything here is a pure function of its inputs. The recording types keep
//! an append-only [`PreprocessStep`] log so a processed bundle records exactly
//! how it was produced.

mod fir;
mod normalize;
mod recording;

pub use fir::{
    design_fir, filtfilt, fir_apply, num_taps_for_transition, DesignSpec, FilterKind, FirFilter,
    Window,
};
pub use normalize::{
    minmax_apply, minmax_apply_rows, minmax_fit, minmax_fit_rows, minmax_invert,
    minmax_invert_rows, zscore_apply, zscore_fit, zscore_invert, AxisRange, ChannelStats,
};
pub use recording::{
    decimate, rereference_average, EegRecording, KinematicsTrack, PreprocessStep, AXES,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigprocError {
    #[error("invalid cutoff: {0}")]
    InvalidCutoff(String),
    #[error("invalid tap count {0}: must be odd and at least 1")]
    InvalidTaps(usize),
    #[error("signal of {len} samples is too short for a {num_taps}-tap zero-phase filter (need more than {needed})")]
    SignalTooShort {
        len: usize,
        num_taps: usize,
        needed: usize,
    },
    #[error("invalid decimation factor {0}")]
    InvalidFactor(usize),
    #[error("average reference needs at least two channels")]
    NeedsMultipleChannels,
    #[error("channel {index} has zero variance")]
    ZeroVariance { index: usize },
    #[error("axis {axis} has a degenerate range (max == min)")]
    DegenerateRange { axis: usize },
    #[error("statistics cover {expected} channels but data has {actual}")]
    ChannelCountMismatch { expected: usize, actual: usize },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
}
