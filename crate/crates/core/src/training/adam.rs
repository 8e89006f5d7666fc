use serde::{Deserialize, Serialize};

use crate::model::{Gradients, Parameters};
use crate::{Error, Result};

/// `base_lr * min(step^-1/2, step * warmup^-3/2)`, peaking at `step == warmup`.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            base_lr: 0.1,
            warmup_steps: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Parameters, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        OptimizerState {
            step: 0,
            config,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, slot: usize) -> &[f64] {
        &self.first[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[f64] {
        &self.second[slot]
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(
            self.step.max(1),
            self.config.base_lr,
            self.config.warmup_steps,
        )
    }
}

/// One bias-corrected Adam step with the scheduled learning rate. Non-finite
/// gradients abort before any parameter is touched.
pub fn adam_update(
    params: &mut Parameters,
    grads: &Gradients,
    st: &mut OptimizerState,
) -> Result<()> {
    if grads.slots.len() != params.tensors().len() {
        return Err(Error::Shape(
            "gradient slots do not match parameters".into(),
        ));
    }
    for (slot, (g, t)) in grads.slots.iter().zip(params.tensors()).enumerate() {
        if g.len() != t.data.len() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has wrong size",
                params.slot_name(slot)
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(params.slot_name(slot).to_string()));
        }
    }
    st.step += 1;
    let c = st.config;
    let lr = lr_at(st.step, c.base_lr, c.warmup_steps);
    let bc1 = 1.0 - c.beta1.powf(st.step as f64);
    let bc2 = 1.0 - c.beta2.powf(st.step as f64);
    for (slot, t) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads.slots[slot];
        let m = &mut st.first[slot];
        let v = &mut st.second[slot];
        for i in 0..t.data.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            t.data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
