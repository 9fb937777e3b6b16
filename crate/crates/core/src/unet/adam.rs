use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{Param, UNet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates mirroring the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        AdamState {
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn for_model(model: &UNet<T>) -> Self {
        Self::new(model.params())
    }

    /// Bias-corrected Adam update from each parameter's `grad`.
    pub fn update(&mut self, params: &mut [Param<T>], learning_rate: f64) {
        assert_eq!(params.len(), self.first.len());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(learning_rate);
        let eps = T::from_f64(self.epsilon);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One optimizer step from the accumulated gradients, which are then cleared.
pub fn adam_step<T: Real>(model: &mut UNet<T>, state: &mut AdamState<T>, learning_rate: f64) -> Result<()> {
    if model.accumulated() == 0 {
        return Err(Error::NoAccumulatedGradients);
    }
    state.update(model.params_mut(), learning_rate);
    model.zero_grad();
    Ok(())
}
