use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::epoching::DesignMatrix;
use crate::gradkit::{
    load_checkpoint, save_checkpoint, Activation, InputShape, LayerSpec, Network, Padding, Tensor,
};

/// Shortest lag window the CNN-LSTM accepts: both pooling stages must leave
/// at least one step (15 / 5 / 3 = 1).
pub const MIN_SEQUENCE_LAG: usize = 15;

const HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetKind {
    /// Batch-normalized MLP over the flattened lag window.
    #[serde(rename = "mlp")]
    PreMovNetI,
    /// Convolution along the lag axis, then an LSTM.
    #[serde(rename = "cnnlstm")]
    PreMovNetII,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::PreMovNetI => "mlp",
            NetKind::PreMovNetII => "cnnlstm",
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetKind {
    type Err = DecoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" | "premovnet1" | "premovnet-i" => Ok(NetKind::PreMovNetI),
            "cnnlstm" | "premovnet2" | "premovnet-ii" => Ok(NetKind::PreMovNetII),
            other => Err(DecoderError::UnknownModel(other.to_string())),
        }
    }
}

fn dense(input: usize, output: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense {
        input,
        output,
        activation,
    }
}

/// Input layout and layer stack for one PreMovNet variant.
pub fn premovnet_layers(
    kind: NetKind,
    lag: usize,
    channels: usize,
) -> Result<(InputShape, Vec<LayerSpec>), DecoderError> {
    if lag == 0 || channels == 0 {
        return Err(DecoderError::ShapeError(format!(
            "lag ({lag}) and channel count ({channels}) must be positive"
        )));
    }
    Ok(match kind {
        NetKind::PreMovNetI => {
            let width = lag * channels;
            (
                InputShape::Flat { width },
                vec![
                    LayerSpec::batch_norm(width),
                    dense(width, HIDDEN, Activation::Relu),
                    dense(HIDDEN, HIDDEN, Activation::Relu),
                    dense(HIDDEN, HIDDEN, Activation::Relu),
                    dense(HIDDEN, 16, Activation::Relu),
                    dense(16, 3, Activation::Linear),
                ],
            )
        }
        NetKind::PreMovNetII => {
            if lag < MIN_SEQUENCE_LAG {
                return Err(DecoderError::SequenceTooShort { lag });
            }
            (
                InputShape::Sequence {
                    steps: lag,
                    features: channels,
                },
                vec![
                    LayerSpec::batch_norm(channels),
                    LayerSpec::Conv1d {
                        in_channels: channels,
                        filters: 256,
                        kernel: 7,
                        padding: Padding::Same,
                        activation: Activation::Relu,
                    },
                    LayerSpec::MaxPool1d { window: 5 },
                    LayerSpec::Conv1d {
                        in_channels: 256,
                        filters: HIDDEN,
                        kernel: 5,
                        padding: Padding::Same,
                        activation: Activation::Relu,
                    },
                    LayerSpec::MaxPool1d { window: 3 },
                    LayerSpec::Dropout { rate: 0.25 },
                    LayerSpec::Lstm {
                        input_size: HIDDEN,
                        cells: HIDDEN,
                        activation: Activation::Relu,
                    },
                    dense(HIDDEN, HIDDEN, Activation::Relu),
                    dense(HIDDEN, 3, Activation::Linear),
                ],
            )
        }
    })
}

/// Trainable parameter count as a closed form in `(kind, lag, channels)`.
pub fn premovnet_param_count(kind: NetKind, lag: usize, channels: usize) -> usize {
    let h = HIDDEN;
    match kind {
        NetKind::PreMovNetI => {
            let w = lag * channels;
            2 * w + (w * h + h) + 2 * (h * h + h) + (h * 16 + 16) + (16 * 3 + 3)
        }
        NetKind::PreMovNetII => {
            2 * channels
                + (7 * channels * 256 + 256)
                + (5 * 256 * h + h)
                + (4 * h * h + 4 * h * h + 4 * h)
                + (h * h + h)
                + (h * 3 + 3)
        }
    }
}

/// Sequence lengths after each pooling stage of the CNN-LSTM.
pub fn pooled_lengths(lag: usize) -> [usize; 3] {
    [lag, lag / 5, lag / 5 / 3]
}

/// A PreMovNet together with the window geometry it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct PreMovNet {
    pub kind: NetKind,
    pub lag: usize,
    pub channels: usize,
    pub net: Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    kind: NetKind,
    lag: usize,
    channels: usize,
}

/// Rows per forward pass in [`PreMovNet::predict`].
const PREDICT_CHUNK: usize = 256;

impl PreMovNet {
    pub fn build(
        kind: NetKind,
        lag: usize,
        channels: usize,
        seed: u64,
    ) -> Result<Self, DecoderError> {
        let (input, layers) = premovnet_layers(kind, lag, channels)?;
        Ok(Self {
            kind,
            lag,
            channels,
            net: Network::new(input, layers, seed)?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.net.trainable_parameter_count()
    }

    fn check_design(&self, design: &DesignMatrix) -> Result<(), DecoderError> {
        if design.lag_count() != self.lag || design.channel_count() != self.channels {
            return Err(DecoderError::ShapeError(format!(
                "design is {} channels x {} lags; model expects {} x {}",
                design.channel_count(),
                design.lag_count(),
                self.channels,
                self.lag
            )));
        }
        Ok(())
    }

    /// Packs design rows into a network input batch. The CNN-LSTM sees each
    /// row as `[lag x channels]` with step 0 the oldest sample.
    pub fn input_batch(&self, rows: &[&[f64]]) -> Tensor {
        let (l, n) = (self.lag, self.channels);
        let mut data = Vec::with_capacity(rows.len() * l * n);
        match self.kind {
            NetKind::PreMovNetI => rows.iter().for_each(|r| data.extend_from_slice(r)),
            NetKind::PreMovNetII => {
                for r in rows {
                    for s in 0..l {
                        for c in 0..n {
                            data.push(r[c * l + (l - 1 - s)]);
                        }
                    }
                }
            }
        }
        Tensor::new(self.net.batch_shape(rows.len()), data).expect("rows match the window")
    }

    /// Eval-mode predictions, one `[x, y, z]` per design row.
    pub fn predict(&self, design: &DesignMatrix) -> Result<Vec<[f64; 3]>, DecoderError> {
        self.check_design(design)?;
        if !self.net.params().all_finite() {
            return Err(DecoderError::CorruptModel("non-finite weights".into()));
        }
        let mut out = Vec::with_capacity(design.rows());
        let rows: Vec<&[f64]> = (0..design.rows()).map(|t| design.row(t)).collect();
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let y = self.net.predict(&self.input_batch(chunk))?;
            out.extend(y.data().chunks_exact(3).map(|r| [r[0], r[1], r[2]]));
        }
        Ok(out)
    }

    /// Writes `<stem>.json` / `<stem>.f64` checkpoint files plus
    /// `<stem>.decoder.json` with the window geometry.
    pub fn save(
        &self,
        dir: &Path,
        stem: &str,
        train_config_hash: &str,
    ) -> Result<PathBuf, DecoderError> {
        let path = save_checkpoint(&self.net, dir, stem, train_config_hash)?;
        let desc = Descriptor {
            kind: self.kind,
            lag: self.lag,
            channels: self.channels,
        };
        let mut json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
        json.push('\n');
        let desc_path = dir.join(format!("{stem}.decoder.json"));
        std::fs::write(&desc_path, json)
            .map_err(|e| DecoderError::Io(format!("{}: {e}", desc_path.display())))?;
        Ok(path)
    }

    /// Loads a model written by [`PreMovNet::save`], given the checkpoint
    /// manifest path.
    pub fn load(manifest: &Path) -> Result<Self, DecoderError> {
        let stem = manifest
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DecoderError::Io(format!("{}: bad file name", manifest.display())))?;
        let desc_path = manifest.with_file_name(format!("{stem}.decoder.json"));
        let text = std::fs::read_to_string(&desc_path)
            .map_err(|e| DecoderError::Io(format!("{}: {e}", desc_path.display())))?;
        let desc: Descriptor =
            serde_json::from_str(&text).map_err(|e| DecoderError::CorruptModel(e.to_string()))?;
        let (net, _) = load_checkpoint(manifest)?;
        let (input, layers) = premovnet_layers(desc.kind, desc.lag, desc.channels)?;
        if net.input_shape() != input || net.specs() != layers {
            return Err(DecoderError::CorruptModel(
                "checkpoint architecture differs from the descriptor".into(),
            ));
        }
        Ok(Self {
            kind: desc.kind,
            lag: desc.lag,
            channels: desc.channels,
            net,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in [NetKind::PreMovNetI, NetKind::PreMovNetII] {
            assert_eq!(k.as_str().parse::<NetKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("svm".parse::<NetKind>().is_err());
    }

    #[test]
    fn sequence_reshape_puts_oldest_first() {
        let m = PreMovNet::build(NetKind::PreMovNetII, 15, 2, 0).unwrap();
        // channel-major row: channel 0 lags 0..15 then channel 1
        let row: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let x = m.input_batch(&[&row]);
        assert_eq!(x.shape(), &[1, 15, 2]);
        assert_eq!(&x.data()[..2], &[14.0, 29.0]);
        assert_eq!(&x.data()[28..], &[0.0, 15.0]);
    }

    #[test]
    fn pooling_arithmetic() {
        assert_eq!(pooled_lengths(25), [25, 5, 1]);
        assert_eq!(pooled_lengths(15), [15, 3, 1]);
        assert_eq!(pooled_lengths(35), [35, 7, 2]);
    }

    #[test]
    fn short_lag_rejected_for_sequence_model() {
        assert_eq!(
            PreMovNet::build(NetKind::PreMovNetII, 14, 21, 0).unwrap_err(),
            DecoderError::SequenceTooShort { lag: 14 }
        );
        assert!(PreMovNet::build(NetKind::PreMovNetI, 14, 21, 0).is_ok());
    }
}
