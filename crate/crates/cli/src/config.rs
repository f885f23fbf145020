//! The JSON run configuration. Every field is optional; command-line flags
//! override the file, which overrides the defaults below.

use std::fs;
use std::path::{Path, PathBuf};

use kinedecode::epoching::MOTOR_CHANNELS;
use kinedecode::harness::{fnv1a, ExperimentConfig, ModelKind, SplitSpec, TrainConfig, DEFAULT_LAGS_MS};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub bundles: Vec<PathBuf>,
    pub models: Vec<ModelKind>,
    pub lags_ms: Vec<u32>,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub lambda: f64,
    pub fit_on_all: bool,
    pub per_trial_pcc: bool,
    /// Write per-trial trajectory CSVs next to the report.
    pub trajectories: bool,
    pub preprocess: PreprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            jobs: 1,
            bundles: Vec::new(),
            models: ModelKind::ALL.to_vec(),
            lags_ms: DEFAULT_LAGS_MS.to_vec(),
            train: TrainConfig::default(),
            split: SplitSpec::Auto,
            lambda: 0.0,
            fit_on_all: false,
            per_trial_pcc: false,
            trajectories: true,
            preprocess: PreprocessConfig::default(),
        }
    }
}

/// Filter and resampling parameters of the preprocessing chain. Tap counts
/// left unset follow the Hamming rule for the stated transition width at the
/// rate the filter runs at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub eeg_band_hz: [f64; 2],
    pub eeg_band_transition_hz: f64,
    pub eeg_band_taps: Option<usize>,
    pub rereference: bool,
    pub target_rate_hz: f64,
    pub delta_band_hz: [f64; 2],
    pub delta_band_transition_hz: f64,
    pub delta_band_taps: Option<usize>,
    pub channels: Vec<String>,
    pub kin_lowpass_hz: f64,
    pub kin_lowpass_transition_hz: f64,
    pub kin_lowpass_taps: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            eeg_band_hz: [0.1, 40.0],
            eeg_band_transition_hz: 0.5,
            eeg_band_taps: None,
            rereference: true,
            target_rate_hz: 100.0,
            delta_band_hz: [0.5, 3.0],
            delta_band_transition_hz: 0.25,
            delta_band_taps: None,
            channels: MOTOR_CHANNELS.iter().map(|s| s.to_string()).collect(),
            kin_lowpass_hz: 2.0,
            kin_lowpass_transition_hz: 0.5,
            kin_lowpass_taps: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            models: self.models.clone(),
            lags_ms: self.lags_ms.clone(),
            train: self.train.clone(),
            split: self.split,
            lambda: self.lambda,
            fit_on_all: self.fit_on_all,
            per_trial_pcc: self.per_trial_pcc,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        self.experiment().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// 16 hex digits identifying the resolved configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_json().as_bytes()))
    }
}

/// What a run directory records about how it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub config: RunConfig,
}

pub const RUN_RECORD_FILE: &str = "config.json";

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let p = run_dir.join(RUN_RECORD_FILE);
        let text = fs::read_to_string(&p)
            .map_err(|e| CliError::Data(format!("cannot read run record {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("run record {}: {e}", p.display())))
    }
}
