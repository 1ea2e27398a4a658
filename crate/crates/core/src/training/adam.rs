//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::model::Model;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in model.params() {
            m.insert(name.clone(), vec![0.0; p.tensor.numel()]);
            v.insert(name.clone(), vec![0.0; p.tensor.numel()]);
        }
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update over every parameter with a gradient.
/// Mutates the model in place.
pub fn adam_step(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    let names: Vec<String> = grads.keys().cloned().collect();
    for name in names {
        let grad = &grads[&name];
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFinite { op: "adam_step" });
        }
        let p = model
            .param(&name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.tensor.numel() != grad.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                details: format!("{name}: {} vs {}", p.tensor.numel(), grad.numel()),
            });
        }
        let m = state.m.get_mut(&name).unwrap();
        let v = state.v.get_mut(&name).unwrap();
        let mut updated = p.tensor.data().to_vec();
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            updated[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        model.apply_update(&name, updated)?;
    }
    Ok(())
}
