//! The three kinematics decoders: closed-form linear regression and the two
//! PreMovNet networks.

mod mlr;
mod premovnet;

pub use mlr::{BetaOrder, MlrLayout, MlrModel};
pub use premovnet::{
    pooled_lengths, premovnet_layers, premovnet_param_count, NetKind, PreMovNet, MIN_SEQUENCE_LAG,
};

use thiserror::Error;

use crate::epoching::DesignMatrix;
use crate::gradkit::GradError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("normal matrix is singular; retry with a small ridge penalty (lambda > 0)")]
    SingularSystem,
    #[error("ridge penalty must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("lag of {lag} samples is too short for the CNN-LSTM (needs at least 15)")]
    SequenceTooShort { lag: usize },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Grad(GradError),
}

impl From<GradError> for DecoderError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::ShapeError(s) => DecoderError::ShapeError(s),
            GradError::CorruptModel(s) => DecoderError::CorruptModel(s),
            GradError::Io(s) => DecoderError::Io(s),
            other => DecoderError::Grad(other),
        }
    }
}

/// Any fitted decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Mlr(MlrModel),
    Net(PreMovNet),
}

impl Decoder {
    pub fn predict(&self, design: &DesignMatrix) -> Result<Vec<[f64; 3]>, DecoderError> {
        match self {
            Decoder::Mlr(m) => m.predict(design),
            Decoder::Net(n) => n.predict(design),
        }
    }
}
