use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{pcc, pcc_axes, HarnessError};
use crate::decoders::Decoder;
use crate::epoching::TrialTensorPair;
use crate::sigproc::{minmax_invert_rows, AxisRange};

pub const TRAJECTORY_HEADER: &str = "t_s,x_meas,y_meas,z_meas,x_pred,y_pred,z_pred";

/// Measured and predicted hand position over one test trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialTrajectory {
    pub trial_id: u32,
    pub sample_rate_hz: f64,
    pub measured: Vec<[f64; 3]>,
    pub predicted: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// Correlation over all test trials concatenated, per axis.
    pub r: [f64; 3],
    /// Mean of per-trial correlations, skipping trials where one is undefined.
    pub per_trial_mean_r: [Option<f64>; 3],
    pub trials: Vec<TrialTrajectory>,
}

/// Predicts every test trial and correlates the concatenated series.
pub fn evaluate(
    decoder: &Decoder,
    test: &[TrialTensorPair],
    sample_rate_hz: f64,
) -> Result<Evaluation, HarnessError> {
    if test.iter().all(|p| p.rows() == 0) {
        return Err(HarnessError::EmptySplit("test"));
    }
    let mut trials = Vec::with_capacity(test.len());
    for p in test {
        trials.push(TrialTrajectory {
            trial_id: p.trial_id,
            sample_rate_hz,
            measured: p.target.clone(),
            predicted: decoder.predict(&p.design)?,
        });
    }
    Evaluation::from_trials(trials)
}

impl Evaluation {
    pub fn from_trials(trials: Vec<TrialTrajectory>) -> Result<Self, HarnessError> {
        let measured: Vec<[f64; 3]> = trials
            .iter()
            .flat_map(|t| t.measured.iter().copied())
            .collect();
        let predicted: Vec<[f64; 3]> = trials
            .iter()
            .flat_map(|t| t.predicted.iter().copied())
            .collect();
        let r = pcc_axes(&measured, &predicted)?;
        let mut per_trial_mean_r = [None; 3];
        for (a, slot) in per_trial_mean_r.iter_mut().enumerate() {
            let rs: Vec<f64> = trials
                .iter()
                .filter_map(|t| {
                    let m: Vec<f64> = t.measured.iter().map(|v| v[a]).collect();
                    let p: Vec<f64> = t.predicted.iter().map(|v| v[a]).collect();
                    pcc(&m, &p).ok()
                })
                .collect();
            if !rs.is_empty() {
                *slot = Some(rs.iter().sum::<f64>() / rs.len() as f64);
            }
        }
        Ok(Self {
            r,
            per_trial_mean_r,
            trials,
        })
    }

    /// Maps predictions back through the target min-max ranges and replaces
    /// the measured series with the untouched `raw` targets (same trial
    /// order). Correlations are unchanged.
    pub fn into_units(mut self, raw: &[TrialTensorPair], ranges: &[AxisRange; 3]) -> Self {
        for (t, p) in self.trials.iter_mut().zip(raw) {
            t.predicted = minmax_invert_rows(&t.predicted, ranges);
            t.measured = p.target.clone();
        }
        self
    }
}

/// Writes one `trial_<id>.csv` per test trial; time is seconds from
/// movement onset.
pub fn export_trajectories(
    eval: &Evaluation,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(eval.trials.len());
    for t in &eval.trials {
        let mut s = String::from(TRAJECTORY_HEADER);
        s.push('\n');
        for (k, (m, p)) in t.measured.iter().zip(&t.predicted).enumerate() {
            let ts = k as f64 / t.sample_rate_hz;
            writeln!(
                s,
                "{ts},{},{},{},{},{},{}",
                m[0], m[1], m[2], p[0], p[1], p[2]
            )
            .expect("writing to a String");
        }
        let path = out_dir.join(format!("trial_{:04}.csv", t.trial_id));
        fs::write(&path, s).map_err(|e| HarnessError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
