use super::tape::Tape;
use super::tensor::Tensor;
use super::{NumError, Result};

/// Whether batch normalization draws statistics from the current batch
/// (train) or from the running estimates (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Learnable affine plus running statistics for one batch-normalization
/// stage over a fixed feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    /// Identity-initialized state: gamma 1, beta 0, running mean 0,
    /// running variance 1.
    pub fn new(features: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(0.0 < momentum && momentum < 1.0) {
            return Err(NumError::Invalid(format!(
                "batch norm momentum must lie in (0,1), got {momentum}"
            )));
        }
        if epsilon <= 0.0 {
            return Err(NumError::Invalid(format!(
                "batch norm epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(BatchNormState {
            gamma: Tensor::full(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::full(vec![features], 1.0),
            momentum,
            epsilon,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// `running ← (1−momentum)·running + momentum·batch` for both statistics.
    /// The batch variance passed in is the biased (divide-by-B) estimator, so
    /// running_var stores the same estimator.
    pub(crate) fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.features();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.len() != f {
                return Err(NumError::ShapeMismatch {
                    expected: vec![f],
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(v) = self.running_var.data().iter().find(|v| **v < 0.0) {
            return Err(NumError::Invalid(format!(
                "running variance must be non-negative, found {v}"
            )));
        }
        Ok(())
    }
}

/// Standalone batch normalization of `x[B, F]`, mutating the running
/// statistics in train mode. See [`Tape::batch_norm`] for the differentiable
/// form; this wrapper evaluates it without retaining the tape.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let g = tape.leaf(state.gamma.clone(), false);
    let b = tape.leaf(state.beta.clone(), false);
    let out = tape.batch_norm(xv, g, b, state, mode)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_identity_configuration_is_near_identity() {
        // running_mean=0, running_var=1, gamma=1, beta=0 ⇒ y = x/sqrt(1+ε)
        let mut state = BatchNormState::new(3, 0.1, 1e-5).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap();
        let y = batch_norm(&x, &mut state, BnMode::Eval).unwrap();
        let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - xv * scale).abs() < 1e-12);
            assert!((yv - xv).abs() < 1e-4);
        }
    }

    #[test]
    fn train_and_eval_agree_when_statistics_coincide() {
        // Batch mean/var equal to running mean/var ⇒ identical outputs.
        let mut state = BatchNormState::new(1, 0.1, 1e-5).unwrap();
        state.running_mean = Tensor::new(vec![1], vec![2.0]).unwrap();
        state.running_var = Tensor::new(vec![1], vec![1.0]).unwrap();
        // batch [1, 3]: mean 2, biased var 1
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let eval = batch_norm(&x, &mut state.clone(), BnMode::Eval).unwrap();
        let train = batch_norm(&x, &mut state, BnMode::Train).unwrap();
        for (a, b) in train.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_hand_example() {
        // x = [[1],[3]], momentum 0.1: output ≈ [[-1],[1]], new running_mean 0.2
        let mut state = BatchNormState::new(1, 0.1, 1e-5).unwrap();
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let y = batch_norm(&x, &mut state, BnMode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
        assert!((state.running_mean.data()[0] - 0.2).abs() < 1e-12);
        // running_var ← 0.9·1 + 0.1·1 = 1
        assert!((state.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_never_mutates_running_statistics() {
        let mut state = BatchNormState::new(2, 0.1, 1e-5).unwrap();
        state.running_mean = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        state.running_var = Tensor::new(vec![2], vec![0.7, 2.0]).unwrap();
        let before = state.clone();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.0]]).unwrap();
        batch_norm(&x, &mut state, BnMode::Eval).unwrap();
        // bitwise equality
        assert_eq!(state.running_mean.data(), before.running_mean.data());
        assert_eq!(state.running_var.data(), before.running_var.data());
    }

    #[test]
    fn train_mode_rejects_single_row_batches() {
        let mut state = BatchNormState::new(2, 0.1, 1e-5).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        match batch_norm(&x, &mut state, BnMode::Train) {
            Err(NumError::BatchTooSmall(1)) => {}
            other => panic!("expected BatchTooSmall, got {other:?}"),
        }
        // eval mode accepts B = 1
        assert!(batch_norm(&x, &mut state, BnMode::Eval).is_ok());
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let mut state = BatchNormState::new(3, 0.1, 1e-5).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(batch_norm(&x, &mut state, BnMode::Train).is_err());
    }
}
