//! Shared helpers for the integration suites: random tensors and a harness
//! that checks an arbitrary tape program against central finite differences.

#![allow(dead_code)]

use ccp_lab::num::{finite_diff_check, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense tensor with entries uniform in [-1, 1).
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Check the gradients of a scalar-valued tape program against central
/// finite differences, returning the max relative error.
///
/// `build` receives a fresh tape plus leaves for every named parameter and
/// must return the scalar loss. It is re-invoked for each probe, so it must
/// be deterministic in the parameters.
pub fn check_program<F>(name: &str, params: &BTreeMap<String, Tensor>, build: F) -> f64
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Var,
{
    let run = |p: &BTreeMap<String, Tensor>| -> (Tape, BTreeMap<String, Var>, Var) {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (n, t) in p {
            vars.insert(n.clone(), tape.leaf(t.clone(), true));
        }
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).len(), 1, "{name}: loss must be scalar");
        (tape, vars, loss)
    };

    let (mut tape, vars, loss) = run(params);
    tape.backward(loss).unwrap();
    let analytic: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(n, v)| (n.clone(), tape.grad(*v)))
        .collect();

    let loss_fn = |p: &BTreeMap<String, Tensor>| -> ccp_lab::num::Result<f64> {
        let (t, _, l) = run(p);
        Ok(t.value(l).data()[0])
    };
    let report = finite_diff_check(loss_fn, params, &analytic, 1e-5, 1e-4).unwrap();
    assert!(
        report.passed(),
        "{name}: max rel err {} exceeds 1e-4",
        report.max_rel_err()
    );
    report.max_rel_err()
}
