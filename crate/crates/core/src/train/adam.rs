use crate::model::ModelParameters;
use crate::tensor::Tensor;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, aligned with parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before any
/// parameter is touched.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(TrainError::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.first.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Contract(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (_, p)) in params.iter_mut().enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
