use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(TrainError::Shape(format!(
            "{} parameter tensors, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
