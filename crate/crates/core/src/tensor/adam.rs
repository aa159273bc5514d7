//! Adam with bias correction over named parameter tensors.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the shared step counter.
#[derive(Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter in `params`. Every parameter must
/// have a gradient of matching shape in `grads`.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient {
            name: name.clone(),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gi;
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar_value(value));
        m
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar_value(0.0));
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamHyper::with_lr(0.1)).unwrap();
        assert_eq!(params["w"].data()[0], 1.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first update lr * sign(grad) up to eps.
        let mut params = single_param(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar_value(1.0));
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamHyper::with_lr(0.1)).unwrap();
        assert!((params["w"].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut params = single_param(1.0);
        let grads = BTreeMap::new();
        let mut state = AdamState::new();
        match adam_step(&mut params, &grads, &mut state, &AdamHyper::with_lr(0.1)) {
            Err(Error::MissingGradient { name }) => assert_eq!(name, "w"),
            other => panic!("expected missing-gradient error, got {other:?}"),
        }
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut params = single_param(0.0);
        let mut state = AdamState::new();
        let hyper = AdamHyper::with_lr(0.1);
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let initial = loss(params["w"].data()[0]);
        let mut last = initial;
        for _ in 0..2 {
            let w = params["w"].data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::scalar_value(2.0 * (w - 3.0)));
            adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
            let now = loss(params["w"].data()[0]);
            assert!(now < last);
            last = now;
        }
    }
}
