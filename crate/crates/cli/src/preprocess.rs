//! The raw-to-decodable chain applied by `kinedecode preprocess`.
//!
//! EEG: band-pass, average reference, downsample, delta band, channel
//! selection. Kinematics: low-pass, downsample. Standardization and min-max
//! scaling wait until the training split is known.

use kinedecode::dataio::ParticipantBundle;
use kinedecode::epoching::{select_channels, ChannelLayout};
use kinedecode::sigproc::{
    design_fir, num_taps_for_transition, rereference_average, DesignSpec, FilterKind,
    PreprocessStep,
};
use thiserror::Error;

use crate::config::PreprocessConfig;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("stage already applied: the input log already contains {stage}")]
    StageAlreadyApplied { stage: String },
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invalid preprocessing configuration: {0}")]
    InvalidConfig(String),
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PreprocessError {
    move |e| PreprocessError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn describe(step: &PreprocessStep) -> String {
    match step {
        PreprocessStep::ZeroPhaseFir { design } => match design.kind {
            FilterKind::Lowpass { cutoff_hz } => format!("a {cutoff_hz} Hz low-pass"),
            FilterKind::Highpass { cutoff_hz } => format!("a {cutoff_hz} Hz high-pass"),
            FilterKind::Bandpass { low_hz, high_hz } => format!("a {low_hz}-{high_hz} Hz band-pass"),
        },
        PreprocessStep::AverageReference => "an average reference".into(),
        PreprocessStep::Downsample { from_hz, to_hz, .. } => {
            format!("a downsample from {from_hz} Hz to {to_hz} Hz")
        }
        PreprocessStep::SelectChannels { .. } => "a channel selection".into(),
    }
}

fn decimation_factor(from_hz: f64, to_hz: f64) -> Result<usize, PreprocessError> {
    let f = from_hz / to_hz;
    if !(f.is_finite() && f >= 1.0 && (f - f.round()).abs() < 1e-9) {
        return Err(PreprocessError::InvalidConfig(format!(
            "{from_hz} Hz is not an integer multiple of the {to_hz} Hz target rate"
        )));
    }
    Ok(f.round() as usize)
}

fn taps(explicit: Option<usize>, fs: f64, transition_hz: f64) -> usize {
    explicit.unwrap_or_else(|| num_taps_for_transition(fs, transition_hz))
}

/// Runs the full chain. Refuses input whose logs show any prior processing.
pub fn preprocess_bundle(
    bundle: &ParticipantBundle,
    cfg: &PreprocessConfig,
) -> Result<ParticipantBundle, PreprocessError> {
    if let Some(step) = bundle.recording.log().first().or(bundle.kinematics.log().first()) {
        return Err(PreprocessError::StageAlreadyApplied {
            stage: describe(step),
        });
    }
    let layout = ChannelLayout::new(cfg.channels.clone()).map_err(|e| PreprocessError::InvalidConfig(e.to_string()))?;

    let rec = &bundle.recording;
    let fs = rec.sample_rate_hz();
    let [lo, hi] = cfg.eeg_band_hz;
    let band = design_fir(DesignSpec::bandpass(lo, hi, fs, taps(cfg.eeg_band_taps, fs, cfg.eeg_band_transition_hz)))
        .map_err(stage("EEG band-pass design"))?;
    let mut rec = rec.filtfilt(&band).map_err(stage("EEG band-pass"))?;
    if cfg.rereference {
        rec = rereference_average(&rec).map_err(stage("average reference"))?;
    }
    let factor = decimation_factor(fs, cfg.target_rate_hz)?;
    let rec = rec.downsample(factor).map_err(stage("EEG downsample"))?;
    let fs = rec.sample_rate_hz();
    let [lo, hi] = cfg.delta_band_hz;
    let delta = design_fir(DesignSpec::bandpass(lo, hi, fs, taps(cfg.delta_band_taps, fs, cfg.delta_band_transition_hz)))
        .map_err(stage("delta band-pass design"))?;
    let rec = rec.filtfilt(&delta).map_err(stage("delta band-pass"))?;
    let rec = select_channels(&rec, &layout).map_err(stage("channel selection"))?;

    let kin = &bundle.kinematics;
    let fs = kin.sample_rate_hz();
    let lowpass = design_fir(DesignSpec::lowpass(cfg.kin_lowpass_hz, fs, taps(cfg.kin_lowpass_taps, fs, cfg.kin_lowpass_transition_hz)))
        .map_err(stage("kinematics low-pass design"))?;
    let kin = kin.filtfilt(&lowpass).map_err(stage("kinematics low-pass"))?;
    let factor = decimation_factor(fs, cfg.target_rate_hz)?;
    let kin = kin.downsample(factor).map_err(stage("kinematics downsample"))?;

    ParticipantBundle::new(
        bundle.participant_id.clone(),
        rec,
        kin,
        bundle.events.clone(),
        bundle.provenance.clone(),
    )
    .map_err(stage("bundle assembly"))
}
