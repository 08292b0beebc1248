use super::tensor::Tensor;
use super::{NumError, Result};
use std::collections::BTreeMap;

/// Outcome of checking one named parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub flagged: bool,
}

/// Per-block comparison of analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| !b.flagged)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare `analytic` gradients of a deterministic scalar `loss_fn` against
/// central differences `(f(p+h) − f(p−h)) / 2h`, coordinate by coordinate.
///
/// Relative error uses `|a−n| / max(|a|+|n|, 1e-6)`; the floor keeps
/// finite-difference noise on near-zero gradients from producing spurious
/// flags. Blocks exceeding `tol` are flagged in the report.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(params.len());

    for (name, tensor) in params {
        let grad = analytic.get(name).ok_or_else(|| {
            NumError::Invalid(format!("no analytic gradient for block {name}"))
        })?;
        if grad.shape() != tensor.shape() {
            return Err(NumError::ShapeMismatch {
                expected: tensor.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        let mut max_rel = 0.0f64;
        for i in 0..tensor.len() {
            let original = tensor.data()[i];

            probe.get_mut(name).unwrap().data_mut()[i] = original + h;
            let plus = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - h;
            let minus = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumError::NonFinite {
                    context: format!("finite-difference probe of {name}[{i}]"),
                    index: i,
                    value: if plus.is_finite() { minus } else { plus },
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            flagged: max_rel > tol,
        });
    }

    Ok(GradCheckReport { tol, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params() -> BTreeMap<String, Tensor> {
        let mut p = BTreeMap::new();
        p.insert(
            "w".to_string(),
            Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap(),
        );
        p
    }

    fn quadratic_loss(p: &BTreeMap<String, Tensor>) -> Result<f64> {
        Ok(p["w"].data().iter().map(|v| v * v).sum::<f64>() / 2.0)
    }

    #[test]
    fn quadratic_gradient_matches() {
        let params = quadratic_params();
        let mut analytic = BTreeMap::new();
        analytic.insert("w".to_string(), params["w"].clone());
        let report =
            finite_diff_check(quadratic_loss, &params, &analytic, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let params = quadratic_params();
        let mut bad = params["w"].clone();
        bad.data_mut()[1] += 1.0;
        let mut analytic = BTreeMap::new();
        analytic.insert("w".to_string(), bad);
        let report =
            finite_diff_check(quadratic_loss, &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        assert!(report.blocks[0].flagged);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let params = quadratic_params();
        let mut analytic = BTreeMap::new();
        analytic.insert("w".to_string(), params["w"].clone());
        let res = finite_diff_check(
            |_| Ok(f64::NAN),
            &params,
            &analytic,
            1e-5,
            1e-4,
        );
        assert!(res.is_err());
    }
}
