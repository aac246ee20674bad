//! Adam with bias correction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter value, kept in f64.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Element>(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Applies one update from the gradients stored on each parameter, consuming them.
pub fn adam_step<T: Element>(params: &mut ParamSet<T>, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state has {} slots for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if params.get(id).grad.is_none() {
            return Err(Error::MissingGradient(params.name(id).to_string()));
        }
    }
    state.t += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let tensor = params.get_mut(id);
        let grad = tensor.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (theta, g)) in tensor.data_mut().iter_mut().zip(grad).enumerate() {
            let g = g.acc();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta = T::from_acc(theta.acc() - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}
