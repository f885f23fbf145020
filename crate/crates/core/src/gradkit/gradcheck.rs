//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{GradError, Mode, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step, in `[1e-6, 1e-4]`.
    pub h: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_elements_per_param: Option<usize>,
    /// Seeds element sampling and the dropout masks.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            max_elements_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(move |p| p.max_rel_error > self.tolerance)
    }
}

/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

fn train_loss(
    net: &mut Network,
    input: &Tensor,
    target: &Tensor,
    seed: u64,
) -> Result<f64, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(net.loss(input, target, Mode::Train, &mut rng, false)?.0)
}

/// Compares backpropagated gradients of the train-mode MSE loss against
/// central differences.
pub fn grad_check(
    net: &Network,
    input: &Tensor,
    target: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradError> {
    let mut work = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    work.loss(input, target, Mode::Train, &mut rng, true)?;
    let analytic: Vec<Vec<f64>> = work
        .params()
        .ids()
        .map(|id| work.params().grad(id).to_vec())
        .collect();
    grad_check_against(net, input, target, &analytic, cfg)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients, one
/// vector per store entry.
pub fn grad_check_against(
    net: &Network,
    input: &Tensor,
    target: &Tensor,
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradError> {
    let mut work = net.clone();
    let mut picker = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let ids: Vec<_> = work.params().trainable_ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let k = id.index();
        let n = work.params().value(id).len();
        let elements: Vec<usize> = match cfg.max_elements_per_param {
            Some(max) if max < n => {
                let mut v = sample(&mut picker, n, max).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: work.params().name(id).to_string(),
            checked: elements.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in elements {
            let original = work.params().value(id).data()[j];
            work.params_mut().value_mut(id).data_mut()[j] = original + cfg.h;
            let plus = train_loss(&mut work, input, target, cfg.seed)?;
            work.params_mut().value_mut(id).data_mut()[j] = original - cfg.h;
            let minus = train_loss(&mut work, input, target, cfg.seed)?;
            work.params_mut().value_mut(id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[k][j];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let passed = params.iter().all(|p| p.max_rel_error <= cfg.tolerance);
    Ok(GradCheckReport {
        params,
        tolerance: cfg.tolerance,
        passed,
    })
}
