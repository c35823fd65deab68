use crate::model::ModelParams;
use crate::tensor::Real;

use super::TrainError;

/// Exponential moving average of the parameters, used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub decay: f64,
    pub shadow: ModelParams<T>,
}

impl<T: Real> EmaState<T> {
    /// Starts the shadow as an exact copy of `params`.
    pub fn new(params: &ModelParams<T>, decay: f64) -> Result<Self, TrainError> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(TrainError::Option(format!(
                "ema decay {decay} outside (0, 1)"
            )));
        }
        Ok(EmaState {
            decay,
            shadow: params.clone(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`.
    pub fn update(&mut self, params: &ModelParams<T>) -> Result<(), TrainError> {
        if params.len() != self.shadow.len() {
            return Err(TrainError::Mismatch("ema tensor count".into()));
        }
        let d = T::lit(self.decay);
        let rest = T::one() - d;
        for (s, p) in self.shadow.tensors.iter_mut().zip(&params.tensors) {
            if s.tensor.shape() != p.tensor.shape() {
                return Err(TrainError::Mismatch(format!("ema shape for {}", p.name)));
            }
            for (sv, &pv) in s.tensor.values_mut().iter_mut().zip(p.tensor.values()) {
                *sv = d * *sv + rest * pv;
            }
        }
        Ok(())
    }
}
