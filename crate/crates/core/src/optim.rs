//! SGD with momentum and decoupled-from-nothing weight decay (the decay is
//! folded into the gradient, the classic formulation):
//!
//! ```text
//! v <- momentum * v + grad + weight_decay * param
//! param <- param - lr * v
//! ```
//!
//! Design notes:
//! - Velocity buffers live in the optimizer, keyed by parameter position, so
//!   a fresh optimizer per training phase starts from zero velocity.
//! - `step` consumes the gradients: parameters come back with `grad` cleared,
//!   which keeps the accumulate-then-step contract explicit.
//! - A parameter with no gradient is an error rather than a silent skip;
//!   forgetting backward (or harvesting) should fail loudly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct SgdOptimizer {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<SgdOptimizer> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                learning_rate
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                momentum
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                weight_decay
            )));
        }
        Ok(SgdOptimizer { learning_rate, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Used by step-decay schedules between epochs.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Applies one update to every parameter and clears their gradients.
    ///
    /// The parameter list must be passed in the same order on every call;
    /// velocity buffers are allocated on first use and checked against the
    /// parameter shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer was built for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, param) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            if v.len() != param.len() {
                return Err(Error::Usage(format!(
                    "parameter {} changed size from {} to {}; rebuild the optimizer",
                    i,
                    v.len(),
                    param.len()
                )));
            }
            let grad = param.grad().ok_or_else(|| {
                Error::Usage(format!("parameter {} has no gradient; run backward first", i))
            })?;
            let grad: Vec<f64> = grad.to_vec();
            let data = param.data_mut();
            for j in 0..data.len() {
                v[j] = self.momentum * v[j] + grad[j] + self.weight_decay * data[j];
                data[j] -= self.learning_rate * v[j];
            }
            param.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn param_with_grad(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::from_vec(vec![1], vec![value]).unwrap().with_grad();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // v = 0.9*0 + 0.5 + 1e-4*1.0 = 0.5001; p = 1.0 - 0.1*0.5001
        let mut p = param_with_grad(1.0, 0.5);
        let mut opt = SgdOptimizer::new(0.1, 0.9, 1e-4).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_relative_eq!(p.data()[0], 1.0 - 0.1 * 0.5001, max_relative = 1e-12);
        assert!(p.grad().is_none(), "step must clear gradients");
    }

    #[test]
    fn momentum_carries_velocity_across_steps() {
        // Two steps with constant grad 1, lr 0.1, momentum 0.5, no decay:
        // v1 = 1, p = -0.1; v2 = 0.5 + 1 = 1.5, p = -0.1 - 0.15 = -0.25.
        let mut p = param_with_grad(0.0, 1.0);
        let mut opt = SgdOptimizer::new(0.1, 0.5, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_relative_eq!(p.data()[0], -0.1, max_relative = 1e-12);
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_relative_eq!(p.data()[0], -0.25, max_relative = 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_gradient_signal() {
        let mut p = param_with_grad(2.0, 0.0);
        let mut opt = SgdOptimizer::new(0.1, 0.0, 0.1).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        // v = 0.1*2.0 = 0.2; p = 2.0 - 0.1*0.2 = 1.98
        assert_relative_eq!(p.data()[0], 1.98, max_relative = 1e-12);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).unwrap().with_grad();
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(SgdOptimizer::new(0.0, 0.9, 0.0).is_err());
        assert!(SgdOptimizer::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdOptimizer::new(0.1, -0.1, 0.0).is_err());
        assert!(SgdOptimizer::new(0.1, 0.9, -1.0).is_err());
    }

    #[test]
    fn resized_parameter_is_rejected_until_optimizer_rebuild() {
        let mut p = param_with_grad(1.0, 0.5);
        let mut opt = SgdOptimizer::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let mut grown = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        grown.accumulate_grad(&[0.1, 0.1]).unwrap();
        assert!(matches!(opt.step(&mut [&mut grown]), Err(Error::Usage(_))));
    }
}
