//! Adam optimizer with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tensor::Scalar;

/// Adam state: per-parameter first and second moments plus a shared step
/// counter. Moments are keyed by parameter handle and allocated lazily.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<usize, Vec<S>>,
    v: BTreeMap<usize, Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    /// Default betas 0.9/0.999 and epsilon 1e-8.
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to the listed parameters, consuming their
    /// accumulated gradients. Parameters without a gradient are treated as
    /// having a zero gradient. With a fresh state and all-zero gradients,
    /// or with a zero learning rate, values are unchanged.
    pub fn adam_step(&mut self, ps: &mut ParamSet<S>, refs: &[ParamRef]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let bc1 = S::one() - S::from_f64(self.beta1.powi(t));
        let bc2 = S::one() - S::from_f64(self.beta2.powi(t));

        for &r in refs {
            let tensor = ps.get_mut(r);
            let n = tensor.numel();
            let grad = tensor.take_grad().unwrap_or_else(|| vec![S::zero(); n]);
            if grad.len() != n {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match parameter `{}`",
                    grad.len(),
                    ps.name(r)
                )));
            }
            let m = self.m.entry(r.index()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(r.index()).or_insert_with(|| vec![S::zero(); n]);
            let tensor = ps.get_mut(r);
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter `{}`",
                        ps.name(r)
                    )));
                }
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    fn one_param(v: f64) -> (ParamSet<f64>, ParamRef) {
        let mut ps = ParamSet::new();
        let r = ps.register("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        (ps, r)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut ps, r) = one_param(1.5);
        let mut adam = OptimizerState::new(0.1);
        ps.get_mut(r).accumulate_grad(&[0.0]).unwrap();
        adam.adam_step(&mut ps, &[r]).unwrap();
        assert_eq!(ps.get(r).data(), &[1.5]);
    }

    #[test]
    fn zero_learning_rate_freezes_parameter() {
        let (mut ps, r) = one_param(1.5);
        let mut adam = OptimizerState::new(0.0);
        ps.get_mut(r).accumulate_grad(&[2.7]).unwrap();
        adam.adam_step(&mut ps, &[r]).unwrap();
        assert_eq!(ps.get(r).data(), &[1.5]);
    }

    #[test]
    fn first_step_on_quadratic_moves_by_roughly_lr() {
        // f(w) = w^2 at w = 1: gradient 2. Bias correction makes the first
        // update m_hat / (sqrt(v_hat) + eps) = 1, so w moves by exactly lr
        // up to the epsilon in the denominator.
        let (mut ps, r) = one_param(1.0);
        let mut adam = OptimizerState::new(0.1);
        ps.get_mut(r).accumulate_grad(&[2.0]).unwrap();
        adam.adam_step(&mut ps, &[r]).unwrap();
        let w = ps.get(r).data()[0];
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let (mut ps, r) = one_param(1.0);
        let mut adam = OptimizerState::new(0.1);
        ps.get_mut(r).accumulate_grad(&[f64::NAN]).unwrap();
        assert!(matches!(adam.adam_step(&mut ps, &[r]), Err(Error::Numeric(_))));
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let (mut ps, r) = one_param(3.0);
        let mut adam = OptimizerState::new(0.05);
        for _ in 0..2000 {
            let w = ps.get(r).data()[0];
            ps.get_mut(r).accumulate_grad(&[2.0 * w]).unwrap();
            adam.adam_step(&mut ps, &[r]).unwrap();
        }
        assert!(ps.get(r).data()[0].abs() < 1e-3);
    }
}
