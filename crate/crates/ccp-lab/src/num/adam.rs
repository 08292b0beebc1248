use super::tensor::Tensor;
use super::{NumError, Result};
use std::collections::BTreeMap;

/// Bias-corrected Adam with an optional linear learning-rate warm-up.
///
/// Moments are kept per named parameter block so the update is independent
/// of enumeration order; `step_count` increases by exactly 1 per
/// [`Adam::step`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps over which the learning rate ramps linearly from ~0 to
    /// `learning_rate`; 0 disables the warm-up.
    pub warmup_steps: u64,
    pub step_count: u64,
    /// Per-block first/second moments plus that block's own update count,
    /// so bias correction stays exact when a block sits out some steps.
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new(learning_rate: f64, warmup_steps: u64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Effective learning rate of update `k` (1-based).
    fn lr_at(&self, k: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (k as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update to every named block. `params` and `grads` must pair
    /// up by name with matching shapes. The learning-rate warm-up follows
    /// the global step count; bias correction follows each block's own
    /// update count.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_count += 1;
        let lr = self.lr_at(self.step_count);

        for (name, param) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| {
                NumError::Invalid(format!("missing gradient for parameter block {name}"))
            })?;
            if grad.shape() != param.shape() {
                return Err(NumError::ShapeMismatch {
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let n = param.len();
            let (m, v, t) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
            if m.len() != n {
                return Err(NumError::ShapeMismatch {
                    expected: vec![n],
                    got: vec![m.len()],
                });
            }
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let pd = param.data_mut();
            let gd = grad.data();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Moments for one block, if the block has been stepped before.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64], u64)> {
        self.moments
            .get(name)
            .map(|(m, v, t)| (m.as_slice(), v.as_slice(), *t))
    }

    pub fn set_moments(&mut self, name: &str, first: Vec<f64>, second: Vec<f64>, updates: u64) {
        self.moments.insert(name.to_string(), (first, second, updates));
    }

    pub fn block_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_block(p: f64) -> (Tensor, String) {
        (Tensor::scalar(p), "p".to_string())
    }

    fn grads_of(g: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::scalar(g));
        m
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut p, name) = one_block(1.0);
        let mut adam = Adam::new(0.1, 0);
        adam.step(&mut [(name, &mut p)], &grads_of(1.0)).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn two_steps_with_constant_gradient() {
        let (mut p, name) = one_block(1.0);
        let mut adam = Adam::new(0.1, 0);
        adam.step(&mut [(name.clone(), &mut p)], &grads_of(1.0)).unwrap();
        adam.step(&mut [(name, &mut p)], &grads_of(1.0)).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-6);
        assert_eq!(adam.step_count, 2);
    }

    #[test]
    fn zero_gradient_with_fresh_state_is_a_noop() {
        let (mut p, name) = one_block(3.25);
        let mut adam = Adam::new(0.1, 0);
        adam.step(&mut [(name, &mut p)], &grads_of(0.0)).unwrap();
        assert_eq!(p.data()[0], 3.25);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let adam = Adam::new(1.0, 4);
        assert_eq!(adam.lr_at(1), 0.25);
        assert_eq!(adam.lr_at(2), 0.5);
        assert_eq!(adam.lr_at(4), 1.0);
        assert_eq!(adam.lr_at(400), 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(vec![2]);
        let mut adam = Adam::new(0.1, 0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::zeros(vec![3]));
        let res = adam.step(&mut [("p".to_string(), &mut p)], &grads);
        assert!(res.is_err());
    }
}
