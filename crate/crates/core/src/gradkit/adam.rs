use serde::{Deserialize, Serialize};

use super::{GradError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every entry of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|id| vec![0.0; params.value(id).len()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            hyper,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from the
/// gradients held in `params`. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<(), GradError> {
    if state.m.len() != params.len() {
        return Err(GradError::ShapeError(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.trainable_ids().collect();
    for &id in &ids {
        if params.grad(id).iter().any(|g| !g.is_finite()) {
            return Err(GradError::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.step += 1;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for id in ids {
        let k = id.index();
        let grad = params.grad(id).to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((p, g), m), v) in params
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradkit::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value), true);
        s.grad_mut(id)[0] = grad;
        s
    }

    #[test]
    fn first_step_matches_reference_recurrence() {
        // m = 0.1, v = 0.001; bias-corrected both are 1: step = -lr / (1 + eps)
        let mut s = single(0.0, 1.0);
        let mut st = AdamState::new(&s, AdamHyper::default());
        adam_step(&mut s, &mut st).unwrap();
        let got = s.value(s.ids().next().unwrap()).data()[0];
        let m = (1.0 - 0.9) * 1.0;
        let v = (1.0 - 0.999) * 1.0;
        let expected = -1e-3 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert!((got - expected).abs() < 1e-18);
        assert!((got + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = single(0.7, 0.0);
        let mut st = AdamState::new(&s, AdamHyper::default());
        for _ in 0..100 {
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.value(s.ids().next().unwrap()).data()[0], 0.7);
    }

    #[test]
    fn replicas_stay_bitwise_identical() {
        let (mut a, mut b) = (single(0.3, 0.0), single(0.3, 0.0));
        let mut sa = AdamState::new(&a, AdamHyper::default());
        let mut sb = sa.clone();
        for k in 0..50 {
            let g = ((k * 7919) % 13) as f64 / 7.0 - 0.9;
            let id = a.ids().next().unwrap();
            a.grad_mut(id)[0] = g;
            b.grad_mut(id)[0] = g;
            adam_step(&mut a, &mut sa).unwrap();
            adam_step(&mut b, &mut sb).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let mut s = single(0.3, f64::NAN);
        let mut st = AdamState::new(&s, AdamHyper::default());
        assert!(
            matches!(adam_step(&mut s, &mut st), Err(GradError::NonFiniteGradient(n)) if n == "w")
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::new();
        let id = s.add("buf", Tensor::scalar(2.0), false);
        s.grad_mut(id)[0] = 5.0;
        let mut st = AdamState::new(&s, AdamHyper::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value(id).data()[0], 2.0);
    }
}
