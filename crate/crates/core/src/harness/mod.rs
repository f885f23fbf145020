//! Training, evaluation and the lag-sweep experiment, plus a synthetic data
//! generator with known ground truth.

mod evaluate;
mod experiment;
mod pcc;
mod synth;
mod train;

pub use evaluate::{evaluate, export_trajectories, Evaluation, TrialTrajectory, TRAJECTORY_HEADER};
pub use experiment::{
    cell_seed, fit_model, fnv1a, lag_samples, prepare, run_cell, run_experiment, score, split_seed,
    Aggregate, ArtifactOptions, CellOutcome, CellResult, ExperimentConfig, Fitted, ModelKind,
    PccEntry, PccReport, PreparedData, SplitSpec, FALLBACK_LAMBDA, DEFAULT_LAGS_MS,
    REPORT_CSV_HEADER,
};
pub use pcc::{pcc, pcc_axes};
pub use synth::{synth_generate, Coupling, GroundTruth, SynthOutput, SynthSpec, TeacherLayer};
pub use train::{mse_loss, train, EarlyStopping, EpochRecord, History, StopDecision, TrainConfig};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataio::DataError;
use crate::decoders::DecoderError;
use crate::epoching::EpochError;
use crate::gradkit::GradError;
use crate::sigproc::SigprocError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("series lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    DivergedTraining { epoch: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Epoch(#[from] EpochError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Signal(#[from] SigprocError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<GradError> for HarnessError {
    fn from(e: GradError) -> Self {
        HarnessError::Decoder(e.into())
    }
}
