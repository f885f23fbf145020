//! The lag sweep: every (participant, model, lag) cell trained and scored
//! independently, then merged into one report.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, export_trajectories, train, Evaluation, HarnessError, History, TrainConfig};
use crate::dataio::ParticipantBundle;
use crate::decoders::{Decoder, DecoderError, MlrModel, NetKind, PreMovNet};
use crate::epoching::{epoch_trials, fit_channel_stats, split_trials, TrialSplit, TrialTensorPair};
use crate::sigproc::{minmax_apply_rows, minmax_fit_rows, AXES};

/// Ridge penalty tried when the unregularized normal matrix is singular.
pub const FALLBACK_LAMBDA: f64 = 1e-8;

pub const DEFAULT_LAGS_MS: [u32; 5] = [150, 200, 250, 300, 350];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlr,
    Mlp,
    Cnnlstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Mlr, ModelKind::Mlp, ModelKind::Cnnlstm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlr => "mlr",
            ModelKind::Mlp => "mlp",
            ModelKind::Cnnlstm => "cnnlstm",
        }
    }

    pub fn net(self) -> Option<NetKind> {
        match self {
            ModelKind::Mlr => None,
            ModelKind::Mlp => Some(NetKind::PreMovNetI),
            ModelKind::Cnnlstm => Some(NetKind::PreMovNetII),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlr" => Ok(ModelKind::Mlr),
            "mlp" | "premovnet1" | "premovnet-i" => Ok(ModelKind::Mlp),
            "cnnlstm" | "premovnet2" | "premovnet-ii" => Ok(ModelKind::Cnnlstm),
            other => Err(HarnessError::InvalidConfig(format!(
                "unknown model {other:?}"
            ))),
        }
    }
}

/// How trials are partitioned into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// 234 / 30 / 30 trials.
    Standard,
    Counts {
        train: usize,
        val: usize,
        test: usize,
    },
    /// 234 : 30 : 30 proportions applied to whatever is available; the
    /// standard counts once at least 294 trials exist.
    Auto,
}

impl SplitSpec {
    pub fn counts(self, available: usize) -> (usize, usize, usize) {
        match self {
            SplitSpec::Standard => (234, 30, 30),
            SplitSpec::Counts { train, val, test } => (train, val, test),
            SplitSpec::Auto if available >= 294 => (234, 30, 30),
            SplitSpec::Auto => {
                let side = ((available * 30) as f64 / 294.0).round().max(1.0) as usize;
                (available.saturating_sub(2 * side), side, side)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub lags_ms: Vec<u32>,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Ridge penalty for the linear decoder.
    pub lambda: f64,
    /// Fit normalization statistics on every trial instead of the training
    /// split.
    pub fit_on_all: bool,
    /// Report the mean of per-trial correlations instead of the correlation
    /// of concatenated test trials.
    pub per_trial_pcc: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            lags_ms: DEFAULT_LAGS_MS.to_vec(),
            train: TrainConfig::default(),
            split: SplitSpec::Auto,
            lambda: 0.0,
            fit_on_all: false,
            per_trial_pcc: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        if self.models.is_empty() || self.lags_ms.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "models and lags_ms must be non-empty".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(HarnessError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.lags_ms.contains(&0) {
            return Err(HarnessError::InvalidConfig("lags must be positive".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for one cell, independent of which other cells run.
pub fn cell_seed(participant: &str, model: ModelKind, lag_ms: u32, base_seed: u64) -> u64 {
    fnv1a(format!("{participant}|{model}|{lag_ms}|{base_seed}").as_bytes())
}

/// Seed of a participant's trial split, shared by all its cells.
pub fn split_seed(participant: &str, base_seed: u64) -> u64 {
    fnv1a(format!("{participant}|split|{base_seed}").as_bytes())
}

/// Lag in samples for a window of `lag_ms` at `sample_rate_hz`.
pub fn lag_samples(lag_ms: u32, sample_rate_hz: f64) -> Result<usize, HarnessError> {
    let exact = lag_ms as f64 * sample_rate_hz / 1000.0;
    let lag = exact.round();
    if (exact - lag).abs() > 1e-9 || lag < 1.0 {
        return Err(HarnessError::InvalidConfig(format!(
            "{lag_ms} ms is not a whole number of samples at {sample_rate_hz} Hz"
        )));
    }
    Ok(lag as usize)
}

/// Epoched, split and normalized data for one (participant, lag).
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub lag: usize,
    pub sample_rate_hz: f64,
    pub split: TrialSplit<TrialTensorPair>,
    /// Test trials before target normalization.
    pub raw_test: Vec<TrialTensorPair>,
    pub target_ranges: [crate::sigproc::AxisRange; 3],
    pub dropped_trials: usize,
}

pub fn prepare(
    bundle: &ParticipantBundle,
    lag: usize,
    split: SplitSpec,
    seed: u64,
    fit_on_all: bool,
) -> Result<PreparedData, HarnessError> {
    let epochs = epoch_trials(bundle, lag)?;
    let (tr, va, te) = split.counts(epochs.pairs.len());
    let split = split_trials(epochs.pairs, tr, va, te, seed)?;
    let fit_set: Vec<&TrialTensorPair> = if fit_on_all {
        split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .collect()
    } else {
        split.train.iter().collect()
    };
    let fit_owned: Vec<TrialTensorPair> = fit_set.iter().map(|p| (*p).clone()).collect();
    let stats = fit_channel_stats(&fit_owned)?;
    let rows: Vec<[f64; 3]> = fit_owned
        .iter()
        .flat_map(|p| p.target.iter().copied())
        .collect();
    let ranges = minmax_fit_rows(&rows)?;
    let raw_test = split.test.clone();
    let norm = |pairs: Vec<TrialTensorPair>| -> Result<Vec<TrialTensorPair>, HarnessError> {
        pairs
            .into_iter()
            .map(|p| {
                Ok(TrialTensorPair {
                    design: p.design.standardized(&stats)?,
                    target: minmax_apply_rows(&p.target, &ranges),
                    ..p
                })
            })
            .collect()
    };
    Ok(PreparedData {
        lag,
        sample_rate_hz: bundle.recording.sample_rate_hz(),
        split: TrialSplit {
            train: norm(split.train)?,
            val: norm(split.val)?,
            test: norm(split.test)?,
        },
        raw_test,
        target_ranges: ranges,
        dropped_trials: epochs.dropped.len(),
    })
}

/// A fitted decoder with its training trace.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub decoder: Decoder,
    pub history: Option<History>,
    pub note: Option<String>,
}

/// Fits one model on prepared data.
pub fn fit_model(
    model: ModelKind,
    data: &PreparedData,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Fitted, HarnessError> {
    let channels = data.split.train[0].design.channel_count();
    match model.net() {
        None => {
            let design =
                crate::epoching::DesignMatrix::stack(data.split.train.iter().map(|p| &p.design))?;
            let targets: Vec<[f64; 3]> = data
                .split
                .train
                .iter()
                .flat_map(|p| p.target.iter().copied())
                .collect();
            match MlrModel::fit(&design, &targets, config.lambda) {
                Ok(m) => Ok(Fitted {
                    decoder: Decoder::Mlr(m),
                    history: None,
                    note: None,
                }),
                Err(DecoderError::SingularSystem) if config.lambda == 0.0 => Ok(Fitted {
                    decoder: Decoder::Mlr(MlrModel::fit(&design, &targets, FALLBACK_LAMBDA)?),
                    history: None,
                    note: Some(format!(
                        "singular normal matrix; refit with lambda = {FALLBACK_LAMBDA}"
                    )),
                }),
                Err(e) => Err(e.into()),
            }
        }
        Some(kind) => {
            let mut net = PreMovNet::build(kind, data.lag, channels, seed)?;
            let cfg = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let history = train(&mut net, &data.split.train, &data.split.val, &cfg)?;
            Ok(Fitted {
                decoder: Decoder::Net(net),
                history: Some(history),
                note: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub participant: String,
    pub model: ModelKind,
    pub lag_ms: u32,
    pub lag_samples: usize,
    pub seed: u64,
    pub r: Option<[f64; 3]>,
    pub error: Option<String>,
    pub note: Option<String>,
    pub epochs_run: Option<usize>,
    pub best_epoch: Option<usize>,
    pub trials: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PccEntry {
    pub participant: String,
    pub model: ModelKind,
    pub lag_ms: u32,
    pub axis: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: ModelKind,
    pub lag_ms: u32,
    pub axis: String,
    pub mean: f64,
    /// Sample standard deviation across participants; 0 with one participant.
    pub std: f64,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PccReport {
    pub base_seed: u64,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub entries: Vec<PccEntry>,
    pub aggregates: Vec<Aggregate>,
}

pub const REPORT_CSV_HEADER: &str = "participant,model,lag_ms,axis,r";

impl PccReport {
    /// Assembles entries and aggregates from cell results.
    pub fn from_cells(base_seed: u64, config: ExperimentConfig, cells: Vec<CellResult>) -> Self {
        let mut entries = Vec::new();
        for c in &cells {
            if let Some(r) = c.r {
                for (a, axis) in AXES.iter().enumerate() {
                    entries.push(PccEntry {
                        participant: c.participant.clone(),
                        model: c.model,
                        lag_ms: c.lag_ms,
                        axis: axis.to_string(),
                        r: r[a],
                    });
                }
            }
        }
        let aggregates = aggregate(&entries, &config);
        Self {
            base_seed,
            config,
            cells,
            entries,
            aggregates,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{},{}",
                e.participant, e.model, e.lag_ms, e.axis, e.r
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 2], HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let csv = dir.join("report.csv");
        let json = dir.join("report.json");
        std::fs::write(&csv, self.to_csv()).map_err(|e| HarnessError::io(&csv, e))?;
        std::fs::write(&json, self.to_json()).map_err(|e| HarnessError::io(&json, e))?;
        Ok([csv, json])
    }

    pub fn aggregate_for(&self, model: ModelKind, lag_ms: u32, axis: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && a.lag_ms == lag_ms && a.axis == axis)
    }
}

fn aggregate(entries: &[PccEntry], config: &ExperimentConfig) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &model in &config.models {
        for &lag_ms in &config.lags_ms {
            for axis in AXES {
                let rs: Vec<f64> = entries
                    .iter()
                    .filter(|e| e.model == model && e.lag_ms == lag_ms && e.axis == axis)
                    .map(|e| e.r)
                    .collect();
                if rs.is_empty() {
                    continue;
                }
                let n = rs.len() as f64;
                let mean = rs.iter().sum::<f64>() / n;
                let std = if rs.len() > 1 {
                    (rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                out.push(Aggregate {
                    model,
                    lag_ms,
                    axis: axis.to_string(),
                    mean,
                    std,
                    participants: rs.len(),
                });
            }
        }
    }
    out
}

/// Where [`run_experiment`] leaves per-cell artifacts, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct ArtifactOptions {
    /// Writes trajectories to `<dir>/<participant>/<model>_<lag>ms/`.
    pub trajectories: Option<PathBuf>,
}

/// Everything one cell produced.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: CellResult,
    pub evaluation: Evaluation,
    pub fitted: Fitted,
}

/// Scores a fitted decoder on the prepared test split, in physical units.
/// Returns the evaluation and the per-axis r selected by `per_trial_pcc`.
pub fn score(
    decoder: &Decoder,
    data: &PreparedData,
    per_trial_pcc: bool,
) -> Result<(Evaluation, [f64; 3]), HarnessError> {
    let eval = evaluate(decoder, &data.split.test, data.sample_rate_hz)?
        .into_units(&data.raw_test, &data.target_ranges);
    let r = if per_trial_pcc {
        let mut r = [0.0; 3];
        for (a, slot) in r.iter_mut().enumerate() {
            *slot = eval.per_trial_mean_r[a].ok_or_else(|| {
                HarnessError::UndefinedCorrelation("no test trial has a defined correlation".into())
            })?;
        }
        r
    } else {
        eval.r
    };
    Ok((eval, r))
}

/// Trains and scores one cell end to end.
pub fn run_cell(
    bundle: &ParticipantBundle,
    model: ModelKind,
    lag_ms: u32,
    config: &ExperimentConfig,
    base_seed: u64,
) -> Result<CellOutcome, HarnessError> {
    let participant = bundle.participant_id.clone();
    let seed = cell_seed(&participant, model, lag_ms, base_seed);
    let lag = lag_samples(lag_ms, bundle.recording.sample_rate_hz())?;
    let data = prepare(
        bundle,
        lag,
        config.split,
        split_seed(&participant, base_seed),
        config.fit_on_all,
    )?;
    let fitted = fit_model(model, &data, config, seed)?;
    let (evaluation, r) = score(&fitted.decoder, &data, config.per_trial_pcc)?;
    let cell = CellResult {
        participant,
        model,
        lag_ms,
        lag_samples: lag,
        seed,
        r: Some(r),
        error: None,
        note: fitted.note.clone(),
        epochs_run: fitted.history.as_ref().map(|h| h.epochs.len()),
        best_epoch: fitted.history.as_ref().map(|h| h.best_epoch),
        trials: Some([
            data.split.train.len(),
            data.split.val.len(),
            data.split.test.len(),
        ]),
    };
    Ok(CellOutcome {
        cell,
        evaluation,
        fitted,
    })
}

/// Runs the full (participant x model x lag) grid on `jobs` worker threads.
/// A failing cell is recorded in the report instead of aborting the run.
pub fn run_experiment(
    bundles: &[ParticipantBundle],
    config: &ExperimentConfig,
    base_seed: u64,
    jobs: usize,
    artifacts: &ArtifactOptions,
) -> Result<PccReport, HarnessError> {
    config.validate()?;
    let mut grid = Vec::new();
    for b in bundles {
        for &m in &config.models {
            for &lag in &config.lags_ms {
                grid.push((b, m, lag));
            }
        }
    }
    let run = |&(b, m, lag): &(&ParticipantBundle, ModelKind, u32)| -> CellResult {
        let outcome = run_cell(b, m, lag, config, base_seed).and_then(|out| {
            if let Some(dir) = &artifacts.trajectories {
                let d = dir.join(&b.participant_id).join(format!("{m}_{lag}ms"));
                export_trajectories(&out.evaluation, &d)?;
            }
            Ok(out.cell)
        });
        outcome.unwrap_or_else(|e| CellResult {
            participant: b.participant_id.clone(),
            model: m,
            lag_ms: lag,
            lag_samples: lag_samples(lag, b.recording.sample_rate_hz()).unwrap_or(0),
            seed: cell_seed(&b.participant_id, m, lag, base_seed),
            r: None,
            error: Some(e.to_string()),
            note: None,
            epochs_run: None,
            best_epoch: None,
            trials: None,
        })
    };
    let cells: Vec<CellResult> = if jobs <= 1 {
        grid.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::InvalidConfig(format!("worker pool: {e}")))?
            .install(|| grid.par_iter().map(run).collect())
    };
    Ok(PccReport::from_cells(base_seed, config.clone(), cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_conversion() {
        assert_eq!(lag_samples(150, 100.0).unwrap(), 15);
        assert_eq!(lag_samples(350, 100.0).unwrap(), 35);
        assert!(lag_samples(155, 100.0).is_err());
    }

    #[test]
    fn auto_split_counts() {
        assert_eq!(SplitSpec::Auto.counts(294), (234, 30, 30));
        assert_eq!(SplitSpec::Auto.counts(300), (234, 30, 30));
        assert_eq!(SplitSpec::Auto.counts(200), (160, 20, 20));
    }

    #[test]
    fn seeds_differ_per_cell() {
        let a = cell_seed("P1", ModelKind::Mlp, 250, 0);
        assert_eq!(a, cell_seed("P1", ModelKind::Mlp, 250, 0));
        assert_ne!(a, cell_seed("P1", ModelKind::Mlp, 200, 0));
        assert_ne!(a, cell_seed("P2", ModelKind::Mlp, 250, 0));
        assert_ne!(a, cell_seed("P1", ModelKind::Cnnlstm, 250, 0));
        assert_ne!(a, cell_seed("P1", ModelKind::Mlp, 250, 1));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn aggregates_use_sample_std() {
        let cells = ["A", "B"]
            .iter()
            .zip([0.4, 0.6])
            .map(|(p, r)| CellResult {
                participant: p.to_string(),
                model: ModelKind::Mlr,
                lag_ms: 150,
                lag_samples: 15,
                seed: 0,
                r: Some([r; 3]),
                error: None,
                note: None,
                epochs_run: None,
                best_epoch: None,
                trials: None,
            })
            .collect();
        let cfg = ExperimentConfig {
            models: vec![ModelKind::Mlr],
            lags_ms: vec![150],
            ..Default::default()
        };
        let rep = PccReport::from_cells(0, cfg, cells);
        assert_eq!(rep.entries.len(), 6);
        let agg = rep.aggregate_for(ModelKind::Mlr, 150, "x").unwrap();
        assert!((agg.mean - 0.5).abs() < 1e-15);
        assert!((agg.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(rep
            .to_csv()
            .starts_with("participant,model,lag_ms,axis,r\nA,mlr,150,x,0.4\n"));
    }
}
