use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter ADAM moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { m, v, t: 0, config }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }
}

fn check_aligned<S: Scalar>(params: &[Tensor<S>], grads: &[Tensor<S>], slots: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != slots {
        return Err(Error::shape(
            "optimizer",
            format!("{} params, {} grads, {} state slots", params.len(), grads.len(), slots),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// One bias-corrected ADAM update, in place.
pub fn adam_step<S: Scalar>(params: &mut [Tensor<S>], grads: &[Tensor<S>], state: &mut AdamState<S>) -> Result<()> {
    check_aligned(params, grads, state.m.len())?;
    for (i, p) in params.iter().enumerate() {
        if state.m[i].shape() != p.shape() {
            return Err(Error::shape("adam", format!("moment {i} shape {:?} vs param {:?}", state.m[i].shape(), p.shape())));
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
    let corr1 = S::of(1.0 - c.beta1.powi(state.t as i32));
    let corr2 = S::of(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps) = (S::of(c.learning_rate), S::of(c.epsilon));

    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for j in 0..pd.len() {
            md[j] = b1 * md[j] + one_b1 * gd[j];
            vd[j] = b2 * vd[j] + one_b2 * gd[j] * gd[j];
            let m_hat = md[j] / corr1;
            let v_hat = vd[j] / corr2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent, kept as a fallback to ADAM.
pub fn sgd_step<S: Scalar>(params: &mut [Tensor<S>], grads: &[Tensor<S>], learning_rate: f64) -> Result<()> {
    check_aligned(params, grads, params.len())?;
    let lr = S::of(learning_rate);
    for (p, g) in params.iter_mut().zip(grads) {
        p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * *d);
    }
    Ok(())
}
