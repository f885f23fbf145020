//! Layer specifications and the sequential [`Network`] that runs them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchStats, GradError, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that keeps the sequence length.
    #[default]
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
    Conv1d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
        activation: Activation,
    },
    /// Stride equals the window.
    MaxPool1d {
        window: usize,
    },
    BatchNorm {
        features: usize,
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        rate: f64,
    },
    /// Runs over the time axis and emits the final hidden state.
    Lstm {
        input_size: usize,
        cells: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    fn validate(&self) -> Result<(), GradError> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(GradError::ShapeError(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Dense { input, output, .. } => {
                positive(input, "dense input")?;
                positive(output, "dense output")
            }
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel,
                ..
            } => {
                positive(in_channels, "conv channels")?;
                positive(filters, "conv filters")?;
                positive(kernel, "conv kernel")
            }
            LayerSpec::MaxPool1d { window } => positive(window, "pool window"),
            LayerSpec::BatchNorm {
                features,
                momentum,
                epsilon,
            } => {
                positive(features, "batch-norm features")?;
                if !(0.0..=1.0).contains(&momentum) || !(epsilon > 0.0) {
                    return Err(GradError::ShapeError(
                        "batch-norm momentum must be in [0, 1] and epsilon positive".into(),
                    ));
                }
                Ok(())
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(GradError::ShapeError(format!(
                        "dropout rate {rate} outside [0, 1)"
                    )))
                }
            }
            LayerSpec::Lstm {
                input_size, cells, ..
            } => {
                positive(input_size, "lstm input")?;
                positive(cells, "lstm cells")
            }
        }
    }
}

/// Per-example input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Flat { width: usize },
    Sequence { steps: usize, features: usize },
}

impl InputShape {
    fn dims(self) -> Vec<usize> {
        match self {
            InputShape::Flat { width } => vec![width],
            InputShape::Sequence { steps, features } => vec![steps, features],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    params: Vec<ParamId>,
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Batch statistics per batch-norm layer (train mode only), to be folded
    /// into the running averages with [`Network::commit_batch_stats`].
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// A feed-forward stack of layers with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: InputShape,
    layers: Vec<Layer>,
    store: ParamStore,
    seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

impl Network {
    /// Builds the stack, checking that consecutive shapes agree, and draws
    /// initial weights from `seed`: He-uniform for dense and convolution
    /// kernels, `±1/sqrt(fan_in)` for LSTM matrices, zero biases except a
    /// forget-gate bias of 1.
    pub fn new(input: InputShape, specs: Vec<LayerSpec>, seed: u64) -> Result<Self, GradError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            spec.validate()?;
            let mismatch = |what: String| {
                Err(GradError::ShapeError(format!(
                    "layer {i} ({what}) cannot take input {shape:?}"
                )))
            };
            let mut params = Vec::new();
            shape = match (&spec, shape) {
                (&LayerSpec::Dense { input, output, .. }, InputShape::Flat { width })
                    if width == input =>
                {
                    let bound = (6.0 / input as f64).sqrt();
                    params.push(store.add(
                        format!("{i}.dense.weight"),
                        uniform(&mut rng, vec![input, output], bound),
                        true,
                    ));
                    params.push(store.add(
                        format!("{i}.dense.bias"),
                        Tensor::zeros(vec![output]),
                        true,
                    ));
                    InputShape::Flat { width: output }
                }
                (
                    &LayerSpec::Conv1d {
                        in_channels,
                        filters,
                        kernel,
                        ..
                    },
                    InputShape::Sequence { steps, features },
                ) if features == in_channels => {
                    let fan_in = kernel * in_channels;
                    params.push(store.add(
                        format!("{i}.conv1d.weight"),
                        uniform(
                            &mut rng,
                            vec![fan_in, filters],
                            (6.0 / fan_in as f64).sqrt(),
                        ),
                        true,
                    ));
                    params.push(store.add(
                        format!("{i}.conv1d.bias"),
                        Tensor::zeros(vec![filters]),
                        true,
                    ));
                    InputShape::Sequence {
                        steps,
                        features: filters,
                    }
                }
                (&LayerSpec::MaxPool1d { window }, InputShape::Sequence { steps, features }) => {
                    if steps / window == 0 {
                        return mismatch(format!("pooling window {window} longer than sequence"));
                    }
                    InputShape::Sequence {
                        steps: steps / window,
                        features,
                    }
                }
                (&LayerSpec::BatchNorm { features, .. }, s)
                    if s.dims().last() == Some(&features) =>
                {
                    params.push(store.add(
                        format!("{i}.bn.gamma"),
                        Tensor::full(vec![features], 1.0),
                        true,
                    ));
                    params.push(store.add(
                        format!("{i}.bn.beta"),
                        Tensor::zeros(vec![features]),
                        true,
                    ));
                    params.push(store.add(
                        format!("{i}.bn.running_mean"),
                        Tensor::zeros(vec![features]),
                        false,
                    ));
                    params.push(store.add(
                        format!("{i}.bn.running_var"),
                        Tensor::full(vec![features], 1.0),
                        false,
                    ));
                    s
                }
                (LayerSpec::Dropout { .. }, s) => s,
                (
                    &LayerSpec::Lstm {
                        input_size, cells, ..
                    },
                    InputShape::Sequence { features, .. },
                ) if features == input_size => {
                    params.push(store.add(
                        format!("{i}.lstm.weight_ih"),
                        uniform(
                            &mut rng,
                            vec![input_size, 4 * cells],
                            1.0 / (input_size as f64).sqrt(),
                        ),
                        true,
                    ));
                    params.push(store.add(
                        format!("{i}.lstm.weight_hh"),
                        uniform(
                            &mut rng,
                            vec![cells, 4 * cells],
                            1.0 / (cells as f64).sqrt(),
                        ),
                        true,
                    ));
                    let mut bias = Tensor::zeros(vec![4 * cells]);
                    bias.data_mut()[cells..2 * cells]
                        .iter_mut()
                        .for_each(|b| *b = 1.0);
                    params.push(store.add(format!("{i}.lstm.bias"), bias, true));
                    InputShape::Flat { width: cells }
                }
                (spec, _) => return mismatch(format!("{spec:?}")),
            };
            layers.push(Layer { spec, params });
        }
        Ok(Self {
            input,
            layers,
            store,
            seed,
        })
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Ids of one layer's parameters in declaration order.
    pub fn layer_params(&self, layer: usize) -> &[ParamId] {
        &self.layers[layer].params
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Batch shape `[batch, ...input dims]` expected by [`Network::forward`].
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.input.dims());
        s
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward, GradError> {
        let got = g.value(x).shape();
        if got.len() != self.input.dims().len() + 1 || got[1..] != self.input.dims()[..] {
            return Err(GradError::ShapeError(format!(
                "network expects [batch, {:?}], got {got:?}",
                self.input.dims()
            )));
        }
        let mut h = x;
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |k: usize, g: &mut Graph| g.param(&self.store, layer.params[k]);
            h = match layer.spec {
                LayerSpec::Dense { activation, .. } => {
                    let (w, b) = (p(0, g), p(1, g));
                    let z = g.matmul(h, w)?;
                    let z = g.add_bias(z, b)?;
                    activate(g, z, activation)
                }
                LayerSpec::Conv1d {
                    kernel, activation, ..
                } => {
                    let (w, b) = (p(0, g), p(1, g));
                    let z = g.conv1d(h, w, b, kernel)?;
                    activate(g, z, activation)
                }
                LayerSpec::MaxPool1d { window } => g.max_pool1d(h, window)?,
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let (gamma, beta) = (p(0, g), p(1, g));
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((
                            self.store.value(layer.params[2]).data(),
                            self.store.value(layer.params[3]).data(),
                        )),
                    };
                    let (y, stats) = g.batch_norm(h, gamma, beta, epsilon, running)?;
                    if let Some(s) = stats {
                        batch_stats.push((i, s));
                    }
                    y
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Train if rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let shape = g.value(h).shape().to_vec();
                        let n = g.value(h).len();
                        let mask = (0..n)
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let m = g.constant(Tensor::new(shape, mask)?);
                        g.mul(h, m)?
                    }
                    _ => h,
                },
                LayerSpec::Lstm {
                    cells, activation, ..
                } => {
                    let (w_ih, w_hh, b) = (p(0, g), p(1, g), p(2, g));
                    let last = lstm(g, h, w_ih, w_hh, b, cells)?;
                    activate(g, last, activation)
                }
            };
        }
        Ok(Forward {
            output: h,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            let LayerSpec::BatchNorm { momentum, .. } = self.layers[*i].spec else {
                continue;
            };
            let (mean_id, var_id) = (self.layers[*i].params[2], self.layers[*i].params[3]);
            for (r, b) in self
                .store
                .value_mut(mean_id)
                .data_mut()
                .iter_mut()
                .zip(&s.mean)
            {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self
                .store
                .value_mut(var_id)
                .data_mut()
                .iter_mut()
                .zip(&s.var)
            {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Eval-mode forward pass without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, GradError> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, x, Mode::Eval, &mut rng)?.output;
        Ok(g.value(out).clone())
    }

    /// MSE loss of one batch and, when `with_grads`, its parameter gradients
    /// (left in the store's gradient buffers after zeroing them).
    pub fn loss(
        &mut self,
        input: &Tensor,
        target: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        with_grads: bool,
    ) -> Result<(f64, Vec<(usize, BatchStats)>), GradError> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = self.forward(&mut g, x, mode, rng)?;
        let t = g.constant(target.clone());
        let loss = g.mse(fwd.output, t)?;
        let value = g.value(loss).data()[0];
        if with_grads {
            let grads = g.backward(loss)?;
            self.store.zero_grads();
            grads.accumulate_into(&mut self.store);
        }
        Ok((value, fwd.batch_stats))
    }
}

fn activate(g: &mut Graph, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Relu => g.relu(x),
        Activation::Linear => x,
    }
}

/// Standard LSTM (gate order input, forget, cell, output) from zero state;
/// returns the final hidden state.
fn lstm(
    g: &mut Graph,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    cells: usize,
) -> Result<Var, GradError> {
    let shape = g.value(x).shape().to_vec();
    let (batch, steps) = (shape[0], shape[1]);
    let mut h = g.constant(Tensor::zeros(vec![batch, cells]));
    let mut c = g.constant(Tensor::zeros(vec![batch, cells]));
    for t in 0..steps {
        let xt = g.time_step(x, t)?;
        let zx = g.matmul(xt, w_ih)?;
        let zh = g.matmul(h, w_hh)?;
        let z = g.add(zx, zh)?;
        let z = g.add_bias(z, b)?;
        let i_pre = g.slice_cols(z, 0, cells)?;
        let i = g.sigmoid(i_pre);
        let f_pre = g.slice_cols(z, cells, cells)?;
        let f = g.sigmoid(f_pre);
        let c_pre = g.slice_cols(z, 2 * cells, cells)?;
        let cand = g.tanh(c_pre);
        let o_pre = g.slice_cols(z, 3 * cells, cells)?;
        let o = g.sigmoid(o_pre);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c);
        h = g.mul(o, squashed)?;
    }
    Ok(h)
}
