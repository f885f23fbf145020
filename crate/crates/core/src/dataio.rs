//! On-disk participant bundles.
//!
//! A bundle is a directory:
//!
//! ```text
//! manifest.json       participant id, rates, channel names, sample counts, provenance
//! eeg.f32             little-endian f32, row-major [channels x samples], microvolts
//! kinematics.csv      t_s,x_mm,y_mm,z_mm
//! events.csv          trial_id,onset_s,rest_s
//! preprocessing.json  optional; the EEG and kinematics preprocessing logs
//! ```
//!
//! Loading validates every invariant; a bundle that loads is safe to epoch.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigproc::{EegRecording, KinematicsTrack, PreprocessStep, SigprocError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EEG_FILE: &str = "eeg.f32";
pub const KINEMATICS_FILE: &str = "kinematics.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const PREPROCESSING_FILE: &str = "preprocessing.json";

const KINEMATICS_HEADER: &str = "t_s,x_mm,y_mm,z_mm";
const EVENTS_HEADER: &str = "trial_id,onset_s,rest_s";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bundle component missing: {}", .0.display())]
    MissingComponent(PathBuf),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("invalid events: {0}")]
    InvalidEvents(String),
    #[error("non-finite value rejected: {0}")]
    RejectedNonFinite(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Signal(#[from] SigprocError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One grasp-and-lift trial, in seconds from recording start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub trial_id: u32,
    pub onset_s: f64,
    pub rest_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub ica_cleaned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantBundle {
    pub participant_id: String,
    pub recording: EegRecording,
    pub kinematics: KinematicsTrack,
    pub events: Vec<TrialEvent>,
    pub provenance: Provenance,
}

impl ParticipantBundle {
    pub fn new(
        participant_id: impl Into<String>,
        recording: EegRecording,
        kinematics: KinematicsTrack,
        events: Vec<TrialEvent>,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        let bundle = Self {
            participant_id: participant_id.into(),
            recording,
            kinematics,
            events,
            provenance,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let eeg_span = self.recording.duration_s();
        let kin_span = self.kinematics.duration_s();
        let coarse = self
            .recording
            .sample_rate_hz()
            .min(self.kinematics.sample_rate_hz());
        if (eeg_span - kin_span).abs() > 1.0 / coarse + 1e-9 {
            return Err(DataError::CorruptBundle(format!(
                "EEG spans {eeg_span} s but kinematics span {kin_span} s"
            )));
        }
        validate_events(&self.events, eeg_span.min(kin_span))
    }
}

fn validate_events(events: &[TrialEvent], span_s: f64) -> Result<(), DataError> {
    let mut ids = HashSet::new();
    for (i, ev) in events.iter().enumerate() {
        if !(ev.onset_s.is_finite() && ev.rest_s.is_finite()) {
            return Err(DataError::InvalidEvents(format!(
                "trial {} has non-finite times",
                ev.trial_id
            )));
        }
        if ev.onset_s >= ev.rest_s {
            return Err(DataError::InvalidEvents(format!(
                "trial {}: onset {} s is not before rest {} s",
                ev.trial_id, ev.onset_s, ev.rest_s
            )));
        }
        if ev.onset_s < 0.0 || ev.rest_s > span_s {
            return Err(DataError::InvalidEvents(format!(
                "trial {} ({}..{} s) lies outside the recorded span 0..{span_s} s",
                ev.trial_id, ev.onset_s, ev.rest_s
            )));
        }
        if !ids.insert(ev.trial_id) {
            return Err(DataError::InvalidEvents(format!(
                "duplicate trial id {}",
                ev.trial_id
            )));
        }
        if i > 0 {
            let prev = &events[i - 1];
            if ev.onset_s < prev.rest_s {
                return Err(DataError::InvalidEvents(format!(
                    "trial {} starts before trial {} ends",
                    ev.trial_id, prev.trial_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    participant_id: String,
    eeg_sample_rate_hz: f64,
    channel_names: Vec<String>,
    eeg_samples: usize,
    kin_sample_rate_hz: f64,
    kin_samples: usize,
    ica_cleaned: bool,
    source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct PreprocessingLogs {
    eeg: Vec<PreprocessStep>,
    kinematics: Vec<PreprocessStep>,
}

pub fn write_bundle(bundle: &ParticipantBundle, path: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = path.as_ref();
    bundle.validate()?;
    let rec = &bundle.recording;
    for (name, ch) in rec.channel_names().iter().zip(rec.data()) {
        if let Some(t) = ch
            .iter()
            .position(|v| !v.is_finite() || !(*v as f32).is_finite())
        {
            return Err(DataError::RejectedNonFinite(format!(
                "EEG channel {name}, sample {t}"
            )));
        }
    }
    if let Some(t) = bundle
        .kinematics
        .data()
        .iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
    {
        return Err(DataError::RejectedNonFinite(format!(
            "kinematics sample {t}"
        )));
    }

    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let manifest = Manifest {
        participant_id: bundle.participant_id.clone(),
        eeg_sample_rate_hz: rec.sample_rate_hz(),
        channel_names: rec.channel_names().to_vec(),
        eeg_samples: rec.n_samples(),
        kin_sample_rate_hz: bundle.kinematics.sample_rate_hz(),
        kin_samples: bundle.kinematics.n_samples(),
        ica_cleaned: bundle.provenance.ica_cleaned,
        source: bundle.provenance.source.clone(),
    };
    let p = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&p, json).map_err(io_err(&p))?;

    let mut eeg = Vec::with_capacity(4 * rec.n_channels() * rec.n_samples());
    for v in rec.data().iter().flatten() {
        eeg.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let p = dir.join(EEG_FILE);
    fs::write(&p, eeg).map_err(io_err(&p))?;

    let fs_kin = bundle.kinematics.sample_rate_hz();
    let mut kin = String::from(KINEMATICS_HEADER);
    kin.push('\n');
    for (i, [x, y, z]) in bundle.kinematics.data().iter().enumerate() {
        writeln!(kin, "{},{x},{y},{z}", i as f64 / fs_kin).unwrap();
    }
    let p = dir.join(KINEMATICS_FILE);
    fs::write(&p, kin).map_err(io_err(&p))?;

    let mut events = String::from(EVENTS_HEADER);
    events.push('\n');
    for ev in &bundle.events {
        writeln!(events, "{},{},{}", ev.trial_id, ev.onset_s, ev.rest_s).unwrap();
    }
    let p = dir.join(EVENTS_FILE);
    fs::write(&p, events).map_err(io_err(&p))?;

    let logs = PreprocessingLogs {
        eeg: rec.log().to_vec(),
        kinematics: bundle.kinematics.log().to_vec(),
    };
    let p = dir.join(PREPROCESSING_FILE);
    if logs != PreprocessingLogs::default() {
        let mut json = serde_json::to_string_pretty(&logs).expect("log serializes");
        json.push('\n');
        fs::write(&p, json).map_err(io_err(&p))?;
    } else if p.exists() {
        fs::remove_file(&p).map_err(io_err(&p))?;
    }
    Ok(())
}

fn read_component(dir: &Path, name: &str) -> Result<Vec<u8>, DataError> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(DataError::MissingComponent(p));
    }
    fs::read(&p).map_err(io_err(&p))
}

fn read_text(dir: &Path, name: &str) -> Result<String, DataError> {
    String::from_utf8(read_component(dir, name)?)
        .map_err(|_| DataError::CorruptBundle(format!("{name} is not valid UTF-8")))
}

fn csv_rows<'a>(
    text: &'a str,
    name: &'a str,
    header: &'a str,
) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)> + 'a, DataError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(DataError::CorruptBundle(format!(
                "{name}: expected header {header:?}, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 2, l.split(',').map(str::trim).collect())))
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, DataError> {
    s.parse()
        .map_err(|_| DataError::CorruptBundle(format!("{name}:{line}: cannot parse {s:?}")))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ParticipantBundle, DataError> {
    let dir = path.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_text(dir, MANIFEST_FILE)?)
        .map_err(|e| DataError::CorruptBundle(format!("{MANIFEST_FILE}: {e}")))?;

    let eeg = read_component(dir, EEG_FILE)?;
    let n_ch = manifest.channel_names.len();
    let expected = 4 * n_ch * manifest.eeg_samples;
    if eeg.len() != expected {
        return Err(DataError::CorruptBundle(format!(
            "{EEG_FILE} holds {} bytes; manifest implies {n_ch} x {} f32 = {expected}",
            eeg.len(),
            manifest.eeg_samples
        )));
    }
    let values: Vec<f64> = eeg
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let data: Vec<Vec<f64>> = if manifest.eeg_samples == 0 {
        vec![Vec::new(); n_ch]
    } else {
        values
            .chunks_exact(manifest.eeg_samples)
            .map(<[f64]>::to_vec)
            .collect()
    };

    let kin_text = read_text(dir, KINEMATICS_FILE)?;
    let mut kin = Vec::with_capacity(manifest.kin_samples);
    for (line, fields) in csv_rows(&kin_text, KINEMATICS_FILE, KINEMATICS_HEADER)? {
        if fields.len() != 4 {
            return Err(DataError::CorruptBundle(format!(
                "{KINEMATICS_FILE}:{line}: expected 4 fields"
            )));
        }
        kin.push([
            parse_field(fields[1], KINEMATICS_FILE, line)?,
            parse_field(fields[2], KINEMATICS_FILE, line)?,
            parse_field(fields[3], KINEMATICS_FILE, line)?,
        ]);
    }
    if kin.len() != manifest.kin_samples {
        return Err(DataError::CorruptBundle(format!(
            "{KINEMATICS_FILE} has {} rows; manifest says {}",
            kin.len(),
            manifest.kin_samples
        )));
    }

    let ev_text = read_text(dir, EVENTS_FILE)?;
    let mut events = Vec::new();
    for (line, fields) in csv_rows(&ev_text, EVENTS_FILE, EVENTS_HEADER)? {
        if fields.len() != 3 {
            return Err(DataError::CorruptBundle(format!(
                "{EVENTS_FILE}:{line}: expected 3 fields"
            )));
        }
        events.push(TrialEvent {
            trial_id: parse_field(fields[0], EVENTS_FILE, line)?,
            onset_s: parse_field(fields[1], EVENTS_FILE, line)?,
            rest_s: parse_field(fields[2], EVENTS_FILE, line)?,
        });
    }

    let logs = match dir.join(PREPROCESSING_FILE) {
        p if p.is_file() => serde_json::from_str(&read_text(dir, PREPROCESSING_FILE)?)
            .map_err(|e| DataError::CorruptBundle(format!("{PREPROCESSING_FILE}: {e}")))?,
        _ => PreprocessingLogs::default(),
    };

    let recording = EegRecording::new(manifest.eeg_sample_rate_hz, manifest.channel_names, data)
        .map_err(|e| DataError::CorruptBundle(e.to_string()))?
        .with_log(logs.eeg);
    let kinematics = KinematicsTrack::new(manifest.kin_sample_rate_hz, kin)
        .map_err(|e| DataError::CorruptBundle(e.to_string()))?
        .with_log(logs.kinematics);
    ParticipantBundle::new(
        manifest.participant_id,
        recording,
        kinematics,
        events,
        Provenance {
            source: manifest.source,
            ica_cleaned: manifest.ica_cleaned,
        },
    )
}
