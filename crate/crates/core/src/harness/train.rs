use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::decoders::PreMovNet;
use crate::epoching::TrialTensorPair;
use crate::gradkit::{adam_step, AdamHyper, AdamState, GradError, Mode, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::InvalidConfig(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses; epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean squared error over all rows and axes of `pairs`.
pub fn mse_loss(model: &PreMovNet, pairs: &[TrialTensorPair]) -> Result<f64, HarnessError> {
    let (mut total, mut count) = (0.0, 0usize);
    for p in pairs {
        let pred = model.predict(&p.design)?;
        for (yp, y) in pred.iter().zip(&p.target) {
            total += (0..3).map(|a| (yp[a] - y[a]).powi(2)).sum::<f64>();
            count += 3;
        }
    }
    Ok(total / count as f64)
}

/// Fits `model` with Adam on rows pooled from `train`, stopping on
/// validation loss and leaving the best-validation weights in place.
pub fn train(
    model: &mut PreMovNet,
    train: &[TrialTensorPair],
    val: &[TrialTensorPair],
    config: &TrainConfig,
) -> Result<History, HarnessError> {
    config.validate()?;
    let rows: Vec<(&[f64], [f64; 3])> = train
        .iter()
        .flat_map(|p| (0..p.rows()).map(move |t| (p.design.row(t), p.target[t])))
        .collect();
    if rows.is_empty() {
        return Err(HarnessError::EmptySplit("training"));
    }
    if val.iter().all(|p| p.rows() == 0) {
        return Err(HarnessError::EmptySplit("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut adam = AdamState::new(model.net.params(), config.adam());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.net.params().snapshot();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        if config.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| rows[i].0).collect();
            let x = model.input_batch(&inputs);
            let y = Tensor::new(
                vec![batch.len(), 3],
                batch.iter().flat_map(|&i| rows[i].1).collect(),
            )?;
            let (loss, stats) = model.net.loss(&x, &y, Mode::Train, &mut rng, true)?;
            if !loss.is_finite() {
                return Err(HarnessError::DivergedTraining { epoch });
            }
            match adam_step(model.net.params_mut(), &mut adam) {
                Err(GradError::NonFiniteGradient(_)) => {
                    return Err(HarnessError::DivergedTraining { epoch })
                }
                other => other?,
            }
            model.net.commit_batch_stats(&stats);
            sum += loss * batch.len() as f64;
        }
        let train_loss = sum / rows.len() as f64;
        let val_loss = mse_loss(model, val)?;
        if !val_loss.is_finite() {
            return Err(HarnessError::DivergedTraining { epoch });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.net.params().snapshot(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    model.net.params_mut().restore(&best);
    Ok(History {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        stopped_early,
    })
}
