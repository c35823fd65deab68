use crate::model::ModelParams;
use crate::tensor::{Real, Tensor};

use super::TrainError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplies the learning rate after every step.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.9995,
            eps: 1e-8,
            lr_decay: 0.999995,
        }
    }
}

/// Moment accumulators aligned with the parameter enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Current learning rate, already decayed `step` times.
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.tensor.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            lr: config.lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. `grads[i]` pairs with `params.tensors[i]`.
    /// Parameters are untouched if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[Vec<T>],
    ) -> Result<(), TrainError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Mismatch(format!(
                "{} parameters, {} gradients, {} moment tensors",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.tensors.iter().zip(grads) {
            if g.len() != p.tensor.len() {
                return Err(TrainError::Mismatch(format!(
                    "gradient length for {}",
                    p.name
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(p.name.clone()));
            }
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as f64;
        let correct1 = 1.0 - c.beta1.powf(t);
        let correct2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let (lr, c1, c2) = (T::lit(self.lr), T::lit(correct1), T::lit(correct2));
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            for (j, w) in p.tensor.values_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.lr *= c.lr_decay;
        Ok(())
    }
}
