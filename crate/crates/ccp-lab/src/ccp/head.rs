use super::{BnWiring, CCPConfig, Result};
use crate::num::{BatchNormState, BnMode, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

const INIT_STD: f64 = 0.02;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Activation between the batch-norm stage and the second affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadActivation {
    Gelu,
    /// Pass-through, for linear wiring tests.
    Identity,
}

/// The projection applied to encoder outputs during contrastive training
/// only: affine → batch norm → activation → affine. Discarded for
/// evaluation and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub bn: BatchNormState,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: HeadActivation,
}

impl ProjectionHead {
    pub fn init(model_dim: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * INIT_STD
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        ProjectionHead {
            w1: normal(rng, vec![model_dim, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            bn: BatchNormState::new(hidden, BN_MOMENTUM, BN_EPS).expect("bn state"),
            w2: normal(rng, vec![hidden, out]),
            b2: Tensor::zeros(vec![out]),
            activation: HeadActivation::Gelu,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.w1".into(), &self.w1),
            ("head.b1".into(), &self.b1),
            ("head.bn_gamma".into(), &self.bn.gamma),
            ("head.bn_beta".into(), &self.bn.beta),
            ("head.w2".into(), &self.w2),
            ("head.b2".into(), &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.w1".into(), &mut self.w1),
            ("head.b1".into(), &mut self.b1),
            ("head.bn_gamma".into(), &mut self.bn.gamma),
            ("head.bn_beta".into(), &mut self.bn.beta),
            ("head.w2".into(), &mut self.w2),
            ("head.b2".into(), &mut self.b2),
        ]
    }

    pub fn leaf(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            w1: tape.leaf(self.w1.clone(), true),
            b1: tape.leaf(self.b1.clone(), true),
            bn_gamma: tape.leaf(self.bn.gamma.clone(), true),
            bn_beta: tape.leaf(self.bn.beta.clone(), true),
            w2: tape.leaf(self.w2.clone(), true),
            b2: tape.leaf(self.b2.clone(), true),
        }
    }

    pub fn grads(&self, tape: &Tape, vars: &HeadVars) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("head.w1".to_string(), tape.grad(vars.w1));
        out.insert("head.b1".to_string(), tape.grad(vars.b1));
        out.insert("head.bn_gamma".to_string(), tape.grad(vars.bn_gamma));
        out.insert("head.bn_beta".to_string(), tape.grad(vars.bn_beta));
        out.insert("head.w2".to_string(), tape.grad(vars.w2));
        out.insert("head.b2".to_string(), tape.grad(vars.b2));
        out
    }

    /// `linear1 → batch_norm(mode) → activation → linear2`. With
    /// `bn_mode = None` the normalization stage is skipped (the ablation
    /// wiring without any batch norm). Train-mode calls fold the batch
    /// statistics into the single shared running store.
    pub fn project(
        &mut self,
        tape: &mut Tape,
        vars: &HeadVars,
        h: Var,
        bn_mode: Option<BnMode>,
    ) -> Result<Var> {
        let x0 = tape.matmul(h, vars.w1);
        let x1 = tape.add_row_vec(x0, vars.b1);
        let xb = match bn_mode {
            Some(mode) => tape.batch_norm(x1, vars.bn_gamma, vars.bn_beta, &mut self.bn, mode)?,
            None => x1,
        };
        let xa = match self.activation {
            HeadActivation::Gelu => tape.gelu(xb),
            HeadActivation::Identity => xb,
        };
        let z0 = tape.matmul(xa, vars.w2);
        Ok(tape.add_row_vec(z0, vars.b2))
    }
}

/// Tape handles for the head's trainable blocks.
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Project the center and context columns through one shared head with the
/// batch-normalization wiring of `config`, returning `(z_c, z_i, e')`.
///
/// In asymmetric wiring, `e = 0` puts the center branch in train mode and
/// the context branch in eval mode; `e = 1` swaps the roles; `e'` is the
/// flipped flag for the next step. Only the train-mode branch touches the
/// running statistics, and the eval branch always reads the statistics as
/// of the start of the step — the current batch contributes nothing to the
/// eval branch, which both blocks the leak completely and keeps the
/// composed loss exactly differentiable.
pub fn asymmetric_forward(
    tape: &mut Tape,
    head: &mut ProjectionHead,
    vars: &HeadVars,
    h_c: Var,
    h_i: Var,
    e: u8,
    config: &CCPConfig,
) -> Result<(Var, Var, u8)> {
    let out = match config.bn_mode {
        BnWiring::Asymmetric => {
            if e == 0 {
                // eval branch first so it sees pre-update running stats
                let z_i = head.project(tape, vars, h_i, Some(BnMode::Eval))?;
                let z_c = head.project(tape, vars, h_c, Some(BnMode::Train))?;
                (z_c, z_i)
            } else {
                let z_c = head.project(tape, vars, h_c, Some(BnMode::Eval))?;
                let z_i = head.project(tape, vars, h_i, Some(BnMode::Train))?;
                (z_c, z_i)
            }
        }
        BnWiring::SymmetricTrain => {
            let z_c = head.project(tape, vars, h_c, Some(BnMode::Train))?;
            let z_i = head.project(tape, vars, h_i, Some(BnMode::Train))?;
            (z_c, z_i)
        }
        BnWiring::SymmetricEval => {
            let z_c = head.project(tape, vars, h_c, Some(BnMode::Eval))?;
            let z_i = head.project(tape, vars, h_i, Some(BnMode::Eval))?;
            (z_c, z_i)
        }
        BnWiring::Off => {
            let z_c = head.project(tape, vars, h_c, None)?;
            let z_i = head.project(tape, vars, h_i, None)?;
            (z_c, z_i)
        }
    };
    Ok((out.0, out.1, 1 - e))
}
